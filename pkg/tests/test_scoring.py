import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipread.lexicon import neti_map
from lipread.scoring import (
    DEL,
    INS,
    MATCH,
    SUB,
    RunResult,
    ScoringError,
    accuracy,
    align_sequences,
    confusion_matrix,
    error_counts,
    map_hyp_to_visemes,
    report_text,
    report_tsv,
    select_scale,
    summarize,
)

from oracles import edit_distance

tokens = st.lists(st.sampled_from("abcd"), max_size=8)


def test_align_examples():
    ops = [op for op, _, _ in align_sequences("abc", "abc")]
    assert ops == [MATCH] * 3
    a = align_sequences("abc", "axc")
    assert [op for op, _, _ in a] == [MATCH, SUB, MATCH]
    a = align_sequences("abc", "ac")
    assert a.counts()[DEL] == 1 and a.distance == 1
    a = align_sequences("ac", "abc")
    assert a.counts()[INS] == 1 and a.n_ref == 2
    assert align_sequences([], "ab").distance == 2
    assert align_sequences("ab", []).distance == 2


@settings(max_examples=200, deadline=None)
@given(tokens, tokens)
def test_alignment_matches_brute_distance(r, h):
    a = align_sequences(r, h)
    assert a.distance == edit_distance(r, h)
    assert a.ref() == list(r) and a.hyp() == list(h)
    assert a.n_ref == len(r)


@settings(max_examples=100, deadline=None)
@given(tokens, tokens)
def test_distance_symmetric_and_bounded(r, h):
    d = align_sequences(r, h).distance
    assert d == align_sequences(h, r).distance
    assert abs(len(r) - len(h)) <= d <= max(len(r), len(h))


def test_accuracy_values():
    ref = {"u": list("abcdefghij")}
    assert accuracy(ref, {"u": list("abcdefghij")}) == 100.0
    assert accuracy(ref, {"u": []}) == 0.0
    # one substitution plus one insertion over ten tokens
    assert accuracy(ref, {"u": list("abXdefghijk")}) == pytest.approx(80.0)
    c = error_counts(ref, {"u": list("abXdefghijk")})
    assert c == {"N": 10, "S": 1, "D": 0, "I": 1}
    # accuracy may go negative with many insertions
    assert accuracy({"u": ["a"]}, {"u": list("abc")}) == -100.0


def test_accuracy_errors():
    with pytest.raises(ScoringError, match="utterance ids"):
        accuracy({"a": ["x"]}, {"b": ["x"]})
    with pytest.raises(ScoringError, match="no reference"):
        accuracy({"a": []}, {"a": []})


def test_confusion_diagonal_and_swap():
    cm = confusion_matrix([align_sequences("abab", "abab")], units=["a", "b"])
    assert np.array_equal(cm.counts, [[2, 0], [0, 2]])
    a = align_sequences("ab", "ba")
    assert [op for op, _, _ in a] == [SUB, SUB]
    cm = confusion_matrix([a])
    assert np.array_equal(cm.counts, [[0, 1], [1, 0]])
    cm = confusion_matrix([align_sequences("aa", "bb")], units=["a", "b"])
    assert np.array_equal(cm.counts, [[0, 2], [0, 0]])
    assert np.allclose(cm.normalized(), [[0, 1], [0, 0]])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(tokens, tokens), min_size=1, max_size=5))
def test_confusion_row_sums(pairs):
    alis = [align_sequences(r, h) for r, h in pairs]
    units = list("abcd")
    cm = confusion_matrix(alis, units=units)
    for i, u in enumerate(units):
        occ = sum(r.count(u) for r, _ in pairs)
        assert cm.counts[i].sum() == occ - cm.deletions[i]
    assert cm.insertions.sum() == sum(a.counts()[INS] for a in alis)
    assert cm.to_tsv().count("\n") == len(units) + 2


def test_map_hyp_to_visemes():
    p2v = neti_map()
    assert map_hyp_to_visemes(["p", "b", "m"], p2v) == [p2v["p"]] * 3


def _run(hyp_words, **kw):
    refs = {"u1": ["a", "b"], "u2": ["c"]}
    key = dict(scenario="SD", features="dct", model="dnn", units="phoneme") | kw
    return RunResult(**key, word_refs=refs, word_hyps=hyp_words, unit_refs=refs, unit_hyps=hyp_words)


def test_summary_single_run_and_reports():
    s = summarize([_run({"u1": ["a", "b"], "u2": ["c"]})],
                  expected_cells=[("SD", "dct", "dnn", "phoneme"), ("SD", "dct", "dnn", "viseme")])
    c = s["cells"][("SD", "dct", "dnn", "phoneme")]
    assert c["word_acc"] == 100.0 and c["word_se"] == 0.0 and c["n_utts"] == 2
    assert s["missing"] == [("SD", "dct", "dnn", "viseme")]
    txt = report_text(s)
    assert "[SD dct dnn phoneme]" in txt and "word_accuracy 100.00 +/- 0.00" in txt
    assert "missing SD dct dnn viseme" in txt
    tsv = report_tsv(s).splitlines()
    assert tsv[0].split("\t")[:4] == ["scenario", "features", "model", "units"] and len(tsv) == 2


def test_summary_error_bar_over_utterances():
    s = summarize([_run({"u1": ["a", "b"], "u2": []})])
    c = s["cells"][("SD", "dct", "dnn", "phoneme")]
    assert c["word_acc"] == pytest.approx(200 / 3)
    assert c["word_se"] == pytest.approx(np.std([100.0, 0.0], ddof=1) / np.sqrt(2))


def test_select_scale_prefers_smallest_on_tie():
    refs = {"u": ["a", "b"]}
    hyps = {5: {"u": ["a"]}, 6: {"u": ["a", "b"]}, 7: {"u": ["a", "b"]}, 8: {"u": []}}
    s, acc, accs = select_scale(refs, hyps)
    assert s == 6 and acc == 100.0 and accs[8] == 0.0
