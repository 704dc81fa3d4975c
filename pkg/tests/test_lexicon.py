import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipread.lexicon import (
    BOS,
    PHONEME,
    VISEME,
    BigramLm,
    Lexicon,
    LexiconError,
    P2VMap,
    derive_viseme_lexicon,
    homophone_groups,
    homophone_histogram,
    lexicon_for_prototypes,
    load_dictionary,
    map_pronunciation,
    neti_map,
    phoneme_units,
    train_bigram_lm,
    viseme_units,
    vocabulary_stats,
)


def test_parse_entry():
    lex = load_dictionary("TALK t ao k\n", phoneme_units())
    assert lex["TALK"] == [("t", "ao", "k")]


def test_duplicate_lines_collapse():
    lex = load_dictionary("WEAR w eh r\nWEAR w eh r\n")
    assert lex["WEAR"] == [("w", "eh", "r")]
    assert lex.n_duplicates == 1


def test_unknown_symbol_named():
    with pytest.raises(LexiconError, match="zz"):
        load_dictionary("FOO t zz\n", phoneme_units())


def test_neti_map_shape():
    p2v = neti_map()
    assert len([v for v in p2v.visemes if v != "S"]) == 12
    assert p2v["p"] == p2v["b"] == p2v["m"]
    assert phoneme_units().primary_silence == "sil"
    assert viseme_units().primary_silence == "S"


def test_map_pronunciation():
    p2v = neti_map()
    assert map_pronunciation(["t", "ao", "k"], p2v) == ("C", "V1", "H")
    assert map_pronunciation(["w", "eh", "r"], p2v) == ("H", "V3", "A")
    assert map_pronunciation([], p2v) == ()
    with pytest.raises(LexiconError):
        map_pronunciation(["qq"], p2v)


def test_shared_viseme_pronunciation():
    lex = load_dictionary("TALK t ao k\nDOG d ao g\n")
    vis = derive_viseme_lexicon(lex, neti_map())
    assert vis["TALK"] == vis["DOG"] == [("C", "V1", "H")]
    assert homophone_groups(vis) == {("C", "V1", "H"): ["TALK", "DOG"]}


def test_wrong_kind_guard():
    vis = Lexicon({"X": [("C", "V1")]}, VISEME)
    with pytest.raises(LexiconError, match="wrong unit kind"):
        derive_viseme_lexicon(vis, neti_map())


def test_singleton():
    vis = derive_viseme_lexicon(load_dictionary("TALK t ao k\n"), neti_map())
    assert vis.words == ["TALK"] and len(list(vis.items())) == 1


def test_example_phoneme_histogram(example_lexicon):
    assert homophone_histogram(example_lexicon) == {1: 7, 2: 2}


def test_example_viseme_histogram(example_lexicon):
    # WHILE maps to H V3 A like CARE/WELL/WHERE/WEAR, so that class has five items
    vis = derive_viseme_lexicon(example_lexicon, neti_map())
    groups = homophone_groups(vis)
    assert sorted(groups[("C", "V1", "H")]) == ["DOG", "DUG", "TALK", "TONGUE"]
    assert sorted(groups[("H", "V3", "A")]) == ["CARE", "WEAR", "WELL", "WHERE", "WHILE"]
    assert homophone_histogram(vis) == {4: 4, 5: 5}


def test_example_vocab_stats(example_lexicon):
    vis = derive_viseme_lexicon(example_lexicon, neti_map())
    st_ = vocabulary_stats(example_lexicon, vis)
    assert st_[PHONEME] == {"words": 9, "pronunciations": 8}
    assert st_[VISEME] == {"words": 9, "pronunciations": 2}


def test_stats_edge_cases(example_lexicon):
    s = vocabulary_stats(example_lexicon, example_lexicon)
    assert s[PHONEME] == s[VISEME]
    e = Lexicon({}, PHONEME)
    assert vocabulary_stats(e, e)[PHONEME] == {"words": 0, "pronunciations": 0}
    with pytest.raises(LexiconError):
        vocabulary_stats(example_lexicon, e)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_histogram_properties(n, seed):
    lex = lexicon_for_prototypes(n, list("abcdef"), np.random.default_rng(seed))
    assert homophone_histogram(lex) == {1: n}
    p2v = P2VMap({"a": "X", "b": "X", "c": "Y", "d": "Y", "e": "Z", "f": "Z"})
    vis = derive_viseme_lexicon(lex, p2v)
    hist = homophone_histogram(vis)
    assert sum(hist.values()) == n
    assert all(items % size == 0 for size, items in hist.items())
    assert vocabulary_stats(lex, vis)[VISEME]["pronunciations"] <= n


def test_lm_counts():
    lm = train_bigram_lm([["a", "b"], ["a", "b"]])
    assert lm.logprob("b", "a") > lm.logprob("a", "a")
    lm.check_normalized()


def test_lm_single_word():
    lm = train_bigram_lm([["a"]])
    lm.check_normalized()
    assert math.exp(lm.logprob("a", BOS)) > 0.5


def test_lm_perplexity_sweep():
    rng = np.random.default_rng(0)
    words = [f"w{i}" for i in range(20)]
    succ = {w: rng.choice(words, 3, replace=False) for w in words}

    def sent():
        s = [words[rng.integers(20)]]
        for _ in range(rng.integers(2, 7)):
            s.append(succ[s[-1]][rng.integers(3)] if rng.random() < 0.8 else words[rng.integers(20)])
        return s

    train = [sent() for _ in range(100)]
    test = [sent() for _ in range(50)]
    p_small = train_bigram_lm(train, 0.5, vocab=words).perplexity(test)
    p_large = train_bigram_lm(train, 10.0, vocab=words).perplexity(test)
    assert p_small <= p_large


@settings(max_examples=25, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abcd"), min_size=1, max_size=6), min_size=1, max_size=12),
       st.floats(0.05, 5.0))
def test_lm_normalized_and_arpa_roundtrip(sents, k):
    lm = train_bigram_lm(sents, k)
    lm.check_normalized()
    back = BigramLm.from_arpa(lm.to_arpa())
    for s in sents:
        assert abs(back.sentence_logprob(s) - lm.sentence_logprob(s)) < 1e-7


def test_lm_empty():
    with pytest.raises(LexiconError):
        train_bigram_lm([])
