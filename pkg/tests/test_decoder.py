import inspect
import itertools
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipread.decoder.decode import Decoder, DecodeError, Lattice, best_path, decode, path_alignment, rescore
from lipread.decoder.fst import EPS, Fst, SymbolTable, compose, shortest_distance
from lipread.decoder.graph import build_graph, grammar_fst, lexicon_fst
from lipread.gmmhmm.model import HmmTopology
from lipread.gmmhmm.tree import TiedStateMap
from lipread.lexicon import (
    BigramLm,
    Lexicon,
    UnitSet,
    derive_viseme_lexicon,
    neti_map,
    train_bigram_lm,
    viseme_units,
)

from oracles import brute_decode, lattice_paths, random_decode_problem


def _acceptor(labels, weights):
    f = Fst()
    s = f.add_state()
    f.start = s
    for lab, w in zip(labels, weights):
        d = f.add_state()
        f.add_arc(s, d, lab, lab, w)
        s = d
    f.set_final(s)
    return f


# -- fst ----------------------------------------------------------------------

def test_compose_linear_chains():
    a = _acceptor([1, 2], [0.5, 1.0])
    b = _acceptor([1, 2], [0.25, 0.0])
    c = compose(a, b)
    assert [p[:2] for p in c.paths(5)] == [((1, 2), (1, 2))]
    assert shortest_distance(c) == pytest.approx(1.75)
    assert compose(a, _acceptor([2, 1], [0, 0])).paths(5) == []


def test_compose_epsilon_filter_keeps_one_path():
    # a emits an output epsilon, b consumes an input epsilon: without a filter
    # both interleavings would survive as duplicate paths
    a = Fst()
    for _ in range(3):
        a.add_state()
    a.start = 0
    a.add_arc(0, 1, 1, EPS, 1.0)
    a.add_arc(1, 2, 2, 2, 0.0)
    a.set_final(2)
    b = Fst()
    for _ in range(3):
        b.add_state()
    b.start = 0
    b.add_arc(0, 1, EPS, 7, 2.0)
    b.add_arc(1, 2, 2, 2, 0.0)
    b.set_final(2)
    paths = compose(a, b).paths(10)
    assert len(paths) == 1
    assert paths[0][0] == (1, 2) and paths[0][1] == (7, 2) and paths[0][2] == pytest.approx(3.0)


# -- grammar ------------------------------------------------------------------

def test_grammar_path_cost_equals_lm_cost(rng):
    vocab = ["a", "b", "c"]
    trans = [[vocab[i] for i in rng.integers(0, 3, rng.integers(1, 4))] for _ in range(6)]
    lm = train_bigram_lm(trans, vocab=vocab)
    words = SymbolTable(vocab)
    best: dict[tuple, float] = {}
    for _, ol, w in grammar_fst(lm, words).paths(max_arcs=7):
        key = tuple(words.symbol(i) for i in ol)
        best[key] = min(best.get(key, np.inf), w)
    for n in range(1, 4):
        for ws in itertools.product(vocab, repeat=n):
            assert best[ws] == pytest.approx(lm.cost(ws), abs=1e-9)


def test_grammar_unigram_only_lm():
    lm = BigramLm(["a"], {"a": np.log(0.5), "</s>": np.log(0.5)})
    g = grammar_fst(lm, SymbolTable(["a"]))
    one = [w for _, ol, w in g.paths(max_arcs=4) if len(ol) == 1]
    assert min(one) == pytest.approx(lm.cost(["a"]))
    assert shortest_distance(g) == pytest.approx(lm.cost([]))
    assert lm.cost(["a"]) == pytest.approx(-2 * np.log(0.5))


def test_viseme_homophones_share_input_path(example_lexicon):
    p2v = neti_map()
    vis = derive_viseme_lexicon(example_lexicon, p2v)
    assert vis["DOG"] == vis["DUG"]
    words = SymbolTable(vis.words)
    fst, _ = lexicon_fst(vis, viseme_units(p2v), words, set(vis.words), optional_silence=False)
    by_word = {}
    for il, ol, _ in fst.paths(max_arcs=3):
        if len(ol) == 1:
            by_word.setdefault(words.symbol(ol[0]), set()).add(il)
    assert by_word["DOG"] == by_word["DUG"]
    assert by_word["DOG"] != by_word["WELL"]


# -- decoding -----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(12))
def test_decoder_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    lex, lm, model, ll = random_decode_problem(rng, max_T=8)
    g = build_graph(lex, lm, model, optional_silence=False)
    lat = Decoder(g).decode(ll, beam=np.inf, lattice_beam=np.inf)
    cost, ws = brute_decode(lm, lex, model, ll)
    if ws is None:
        assert lat.empty
        return
    bp = best_path(lat)
    assert tuple(bp.words) == ws
    assert bp.cost * 0.1 == pytest.approx(cost, abs=1e-6)


def _single_unit_graph():
    us = UnitSet(("u",), "phoneme")
    lex = Lexicon({"w": [("u",)]}, "phoneme")
    lm = BigramLm(["w"], {"w": 0.0, "</s>": 0.0})
    model = SimpleNamespace(units=us, topo=HmmTopology(1, 3), tree=TiedStateMap.context_independent(1))
    return build_graph(lex, lm, model, optional_silence=False)


@pytest.mark.parametrize("beam", [0.5, 13.0, np.inf])
def test_single_path_graph_gives_one_path(rng, beam):
    g = _single_unit_graph()
    ll = rng.normal(size=(3, 3))
    lat = Decoder(g).decode(ll, beam=beam, lattice_beam=beam)
    paths = lattice_paths(lat)
    assert len(paths) == 1
    bp = best_path(lat)
    assert bp.words == ["w"] and len(bp.tids) == 3
    ali = path_alignment(g, bp.tids)
    assert list(ali.state) == [0, 1, 2]
    assert bp.model_cost == pytest.approx(-ll[[0, 1, 2], [0, 1, 2]].sum() - 3 * np.log(0.25))


def test_too_few_frames_gives_empty_lattice(rng):
    lat = Decoder(_single_unit_graph()).decode(rng.normal(size=(2, 3)))
    assert lat.empty and lat.diagnostic
    with pytest.raises(DecodeError, match="empty lattice"):
        best_path(lat)
    with pytest.raises(DecodeError):
        rescore(lat)


def test_lattice_paths_within_lattice_beam(rng):
    lex, lm, model, ll = random_decode_problem(np.random.default_rng(3), max_T=8)
    g = build_graph(lex, lm, model, optional_silence=False)
    lat = Decoder(g).decode(ll, beam=np.inf, lattice_beam=2.0)
    if lat.empty:
        return
    costs = [0.1 * m + l_ for _, m, l_ in lattice_paths(lat)]
    assert min(costs) == pytest.approx(best_path(lat).cost * 0.1)


# -- lattices -----------------------------------------------------------------

def _two_path():
    return Lattice.from_arcs([(0, 1, 1, 1, 10.0, 2.0), (0, 2, 2, 2, 14.0, 1.5)],
                             {1: 0.0, 2: 0.0}, SymbolTable(["a", "b"]))


def test_lm_scale_crossover():
    lat = _two_path()
    # 10 + 2s vs 14 + 1.5s cross at s = 8; the tie goes to the smaller word id
    for s in range(1, 9):
        assert best_path(lat, s).words == ["a"]
    for s in range(9, 16):
        assert best_path(lat, s).words == ["b"]
    res = rescore(lat)
    assert sorted(res) == list(range(5, 16))
    assert res[8].cost == pytest.approx(26.0)


def test_tie_break_is_lexicographic():
    words = SymbolTable(["a", "b", "c"])
    # paths "b a" and "a c" with identical costs
    lat = Lattice.from_arcs([(0, 1, 1, 2, 1.0, 0.0), (1, 3, 2, 1, 1.0, 0.0),
                             (0, 2, 3, 1, 1.0, 0.0), (2, 3, 4, 3, 1.0, 0.0)], {3: 0.0}, words)
    assert best_path(lat).words == ["a", "c"]


def _random_lattice(r, n_words=3):
    n = int(r.integers(2, 7))
    arcs = []
    for d in range(1, n):
        for s in sorted(set(r.integers(0, d, r.integers(1, 3)).tolist())):
            w = int(r.integers(0, n_words + 1))
            arcs.append((s, d, int(r.integers(1, 5)), w, float(r.integers(0, 4)), float(r.integers(0, 3))))
    finals = {int(x): float(r.integers(0, 2)) for x in r.integers(1, n, r.integers(1, 3))}
    return Lattice.from_arcs(arcs, finals, SymbolTable([f"w{i}" for i in range(n_words)]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 15))
def test_best_path_matches_enumeration(seed, s):
    lat = _random_lattice(np.random.default_rng(seed))
    paths = lattice_paths(lat)
    assert len(paths) <= 100
    reachable = [(m + s * l_, w) for w, m, l_ in paths]
    if not reachable:
        with pytest.raises(DecodeError):
            best_path(lat, s)
        return
    cost, ws = min(reachable)
    bp = best_path(lat, s)
    assert bp.cost == pytest.approx(cost)
    assert bp.word_ids == ws


def test_lattice_text_round_trip(rng):
    lex, lm, model, ll = random_decode_problem(np.random.default_rng(5), max_T=8)
    lat = Decoder(build_graph(lex, lm, model, optional_silence=False)).decode(ll, beam=np.inf, lattice_beam=np.inf)
    back = Lattice.from_text(lat.to_text(), lat.words)
    assert back.to_text() == lat.to_text()
    if not lat.empty:
        assert best_path(back).word_ids == best_path(lat).word_ids


def test_single_path_lattice_same_at_every_scale():
    lat = Lattice.from_arcs([(0, 1, 1, 1, 3.0, 1.0), (1, 2, 2, EPS, 2.0, 0.0)], {2: 0.5}, SymbolTable(["a"]))
    res = rescore(lat)
    assert len(res) == 11
    assert {tuple(b.words) for b in res.values()} == {("a",)}
    assert all(b.model_cost == 5.0 and b.lm_cost == 1.5 for b in res.values())


def test_default_search_parameters():
    p = inspect.signature(decode).parameters
    assert p["beam"].default == 13.0 and p["lattice_beam"].default == 8.0
    assert p["model_scale"].default == 0.1 and p["max_active"].default == 7000
    assert list(inspect.signature(rescore).parameters["lm_scales"].default) == list(range(5, 16))
