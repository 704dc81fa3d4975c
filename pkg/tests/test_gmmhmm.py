import copy
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipread.corpus import generate_synthetic_corpus
from lipread.frontend import extract_features
from lipread.gmmhmm import train as T
from lipread.gmmhmm.gmm import DiagGmmSet, GmmStats, allocate_gaussians, gmm_state_loglike, update_gmms
from lipread.gmmhmm.model import (
    AcousticModel,
    Alignment,
    AlignmentError,
    build_state_graph,
    path_score,
    read_alignments,
    transcript_units,
    viterbi,
    viterbi_align,
    write_alignments,
)
from lipread.gmmhmm.tree import BOUNDARY, ContextStats, TiedStateMap, build_tree
from lipread.lexicon import Lexicon, UnitSet
from lipread.transforms import FeatureMap, apply_speaker_transforms, map_deltas, speaker_mean_normalize

XY = UnitSet(("x", "y"), "phoneme")


def _segments(ali):
    idx = ali.unit * 3 + ali.state
    return [np.flatnonzero(idx == k).tolist() for k in dict.fromkeys(idx.tolist())]


@pytest.mark.parametrize("pron,T_,expect", [
    (("x",), 9, [[0, 1, 2], [3, 4, 5], [6, 7, 8]]),
    (("x",), 10, [[0, 1, 2], [3, 4, 5], [6, 7, 8, 9]]),
    (("x", "y"), 12, [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9], [10, 11]]),
])
def test_flat_start_equal_split(rng, pron, T_, expect):
    lex = Lexicon({"A": [pron]}, "phoneme")
    feats = {"u": rng.normal(size=(T_, 2))}
    _, alis = T.flat_start(feats, {"u": ["A"]}, lex, XY, boundary_silence=False)
    assert _segments(alis["u"]) == expect


def test_flat_start_skips_short(rng):
    lex = Lexicon({"A": [("x", "y")]}, "phoneme")
    feats = {"short": rng.normal(size=(4, 2)), "ok": rng.normal(size=(8, 2))}
    _, alis = T.flat_start(feats, {"short": ["A"], "ok": ["A"]}, lex, XY, boundary_silence=False)
    assert list(alis) == ["ok"]


def test_stage_defaults():
    assert T.ci_config().max_gauss == 1000
    cd = T.cd_config()
    assert (cd.max_leaves, cd.max_gauss, cd.converge_tol) == (2000, 10_000, 1e-4)
    ci = T.ci_config(n_iters=40)
    assert set(range(1, 11)) <= ci.realign_iters and 11 not in ci.realign_iters and 12 in ci.realign_iters
    assert cd.realign_iters == frozenset({10, 20, 30})


def test_single_gaussian_mle(rng):
    X = rng.normal([1.0, -2.0], [0.5, 2.0], size=(2000, 2))
    g = DiagGmmSet.single([[0.0, 0.0]], [[1.0, 1.0]])
    pdf = np.zeros(len(X), dtype=int)
    for _ in range(5):
        g = update_gmms(g, GmmStats(1, 2).accumulate(g, X, pdf), np.full(2, 1e-6))
    assert np.allclose(g.means[0], X.mean(0), rtol=0.02)
    assert np.allclose(g.vars[0], X.var(0), rtol=0.02)


def test_gmm_closed_forms():
    var = np.array([0.5, 2.0, 1.5])
    g = DiagGmmSet.single([[1.0, 2.0, 3.0]], [var])
    expect = -0.5 * (3 * np.log(2 * np.pi) + np.log(var).sum())
    assert abs(gmm_state_loglike(g, 0, [1.0, 2.0, 3.0]) - expect) < 1e-12
    a = gmm_state_loglike(g, 0, [1.5, 2.0, 3.0])
    b = gmm_state_loglike(g, 0, [2.5, 2.0, 3.0])
    assert expect > a > b
    two = DiagGmmSet([0.5, 0.5], [[-1.0], [1.0]], [[1.0], [1.0]], [0, 0])
    one = DiagGmmSet.single([[-1.0]], [[1.0]])
    assert abs(gmm_state_loglike(two, 0, [0.0]) - gmm_state_loglike(one, 0, [0.0])) < 1e-12


def test_allocate_gaussians():
    t = allocate_gaussians([1000.0, 10.0, 5000.0], budget=20, min_occ_per_gauss=20)
    assert t[1] == 1 and t.sum() <= 21 and t[2] >= t[0]


def _brute_viterbi(emit, loop, fwd, preds, initial, final):
    T_, S = emit.shape
    best, arg = -np.inf, None
    for path in itertools.product(range(S), repeat=T_):
        if path[0] not in initial or path[-1] not in final:
            continue
        if any(b != a and a not in preds[b] for a, b in zip(path, path[1:])):
            continue
        s = path_score(path, emit, loop, fwd)
        if s > best + 1e-12:
            best, arg = s, path
    return arg, best


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_viterbi_matches_enumeration(seed):
    r = np.random.default_rng(seed)
    n_units = int(r.integers(1, 3))
    seq = transcript_units(["A"] * n_units, Lexicon({"A": [("x",)]}, "phoneme"),
                           UnitSet(("x", "s"), "phoneme", frozenset({"s"})), optional_silence=bool(r.integers(2)))
    g = build_state_graph(seq, n_states=int(r.integers(1, 3)))
    T_ = int(r.integers(1, 7))
    emit = r.normal(size=(T_, g.n_states))
    loop = np.log(r.uniform(0.1, 0.9, g.n_states))
    fwd = np.log1p(-np.exp(loop))
    path, score = viterbi(emit, loop, fwd, g.preds, g.initial, g.final)
    bpath, bscore = _brute_viterbi(emit, loop, fwd, g.preds, g.initial, g.final)
    if bpath is None:
        assert path is None
    else:
        assert abs(score - bscore) < 1e-9
        assert abs(path_score(path, emit, loop, fwd) - score) < 1e-9
        assert len(path) == T_


def test_viterbi_forced_unique_path(rng):
    g = build_state_graph(transcript_units(["A"], Lexicon({"A": [("x", "y")]}, "phoneme"), XY, False), 3)
    emit = rng.normal(size=(6, 6))
    path, _ = viterbi(emit, np.full(6, -1.0), np.full(6, -0.5), g.preds, g.initial, g.final)
    assert path.tolist() == list(range(6))
    path, score = viterbi(emit[:5], np.full(6, -1.0), np.full(6, -0.5), g.preds, g.initial, g.final)
    assert path is None and score == -np.inf


def test_identical_contexts_no_split(rng):
    cs = ContextStats(2)
    for left in (0, 1, BOUNDARY):
        X = rng.normal(size=(400, 2))
        n = len(X)
        ali = Alignment(np.full(n, 2), np.zeros(n, int), np.zeros(n, int), np.full(n, left),
                        np.full(n, BOUNDARY), np.ones(n, bool))
        cs.accumulate(ali, X)
    tree = build_tree(cs, 3, max_leaves=50, n_states=1, var_floor=1e-6)
    assert tree.n_leaves == 3


def test_distinct_contexts_split(rng):
    cs = ContextStats(2)
    for left, mu in ((0, 0.0), (1, 5.0)):
        X = rng.normal(mu, 1.0, size=(400, 2))
        n = len(X)
        ali = Alignment(np.full(n, 2), np.zeros(n, int), np.zeros(n, int), np.full(n, left),
                        np.full(n, BOUNDARY), np.ones(n, bool))
        cs.accumulate(ali, X)
    for u in (0, 1):
        X = rng.normal(u * 5.0, 1.0, size=(50, 2))
        n = len(X)
        cs.accumulate(Alignment(np.full(n, u), np.zeros(n, int), np.zeros(n, int), np.full(n, BOUNDARY),
                                np.full(n, BOUNDARY), np.ones(n, bool)), X)
    tree = build_tree(cs, 3, max_leaves=50, n_states=1, var_floor=1e-6)
    assert tree.resolve(2, 0, left=0) != tree.resolve(2, 0, left=1)
    assert tree.n_pdfs == tree.n_leaves


def test_tree_records_roundtrip():
    t = TiedStateMap.context_independent(4, 3)
    assert TiedStateMap.from_records(t.to_records()).resolve(3, 2) == t.resolve(3, 2) == 11


# -- training on a small synthetic corpus ---------------------------------------

@pytest.fixture(scope="module")
def small(request):
    units = UnitSet(tuple("p b t d k g".split()) + ("sil",), "phoneme", frozenset({"sil"}))
    c = generate_synthetic_corpus(units, n_speakers=3, utts_per_speaker=8, words_per_utt=3, n_words=10,
                                  image_size=(16, 16), silence_frames=(2, 4), seed=2)
    raw = FeatureMap(extract_features(c, "dct", n_coeffs=12))
    mn = speaker_mean_normalize(raw, c.utt2spk)
    feats = map_deltas(mn)
    model, alis = T.flat_start(feats, c.transcripts, c.lexicon, units)
    model, alis, ci_log = T.em_train_ci(model, feats, c.transcripts, c.lexicon, alis,
                                        T.ci_config(n_iters=8, max_gauss=3))
    return dict(corpus=c, units=units, raw=raw, mn=mn, feats=feats, model=model, alis=alis, ci_log=ci_log)


def test_ci_monotone(small):
    assert small["ci_log"].check_monotone() == []
    assert len(small["ci_log"].em_updates()) == 8


def test_alignment_length_and_io(small, tmp_path):
    c, model = small["corpus"], small["model"]
    uid = c.utterances[0].id
    ali = viterbi_align(model, small["feats"][uid], c.transcripts[uid], c.lexicon)
    assert len(ali) == len(small["feats"][uid])
    write_alignments({uid: ali}, tmp_path / "a.ark")
    back = read_alignments(tmp_path / "a.ark")[uid]
    assert np.array_equal(back.pdf, ali.pdf) and np.array_equal(back.fwd, ali.fwd)
    with pytest.raises(AlignmentError):
        viterbi_align(model, small["feats"][uid][:3], c.transcripts[uid], c.lexicon)


def test_model_save_load(small, tmp_path):
    m = small["model"]
    m.save(tmp_path / "m.mdl")
    m2 = AcousticModel.load(tmp_path / "m.mdl")
    X = small["feats"][small["corpus"].utterances[0].id]
    assert np.allclose(m.gmms.loglik(X), m2.gmms.loglik(X))


def test_cd_improves_on_ci(small):
    c = small["corpus"]
    cd, alis, log = T.train_cd(small["model"], small["feats"], c.transcripts, c.lexicon, small["alis"],
                               T.cd_config(n_iters=6, max_gauss=60, max_leaves=40, realign_every=3))
    assert log.check_monotone() == []
    ci_ll = small["ci_log"].em_updates()[-1]
    cd_ll = log.em_updates()[-1]
    assert cd_ll["ll_after"] / cd_ll["frames"] >= ci_ll["ll_after"] / ci_ll["frames"]
    assert cd.tree.n_leaves <= 40 + 3 * len(small["units"])


def _jacobian(xf, feats, utt2spk):
    return sum(len(x) * np.linalg.slogdet(xf[utt2spk[k]].matrix)[1] for k, x in feats.items())


def test_sat_with_speaker_shifts(small):
    c, units = small["corpus"], small["units"]
    shift = {s: np.random.default_rng(i).normal(0, 2.0, 12) for i, s in enumerate(c.speakers)}
    raw = FeatureMap({k: v + shift[c.utt2spk[k]] for k, v in small["raw"].items()})
    model, alis = T.flat_start(raw, c.transcripts, c.lexicon, units)
    model, alis, _ = T.em_train_ci(model, raw, c.transcripts, c.lexicon, alis, T.ci_config(n_iters=6, max_gauss=1))
    base = copy.deepcopy(model)
    cfg = T.cd_config(n_iters=6, realign_every=100)
    sat, sat_alis, xf, slog = T.train_sat(model, raw, c.transcripts, c.lexicon, alis, c.utt2spk, cfg,
                                          fmllr_iters=(1, 3))
    assert len(xf) == len(c.speakers)
    assert slog.check_monotone() == []
    assert sum(1 for r in slog.records if "fmllr" in r) == 2
    plain = T.StageLog("plain")
    base, plain_alis = T.run_em(base, raw, c.transcripts, c.lexicon, alis,
                                T.StageConfig(6, frozenset(), 1, inc_until=0), plain)
    keys = list(sat_alis)
    adapted = apply_speaker_transforms(raw, xf, c.utt2spk)
    sat_ll = T.total_loglik(sat, [adapted[k] for k in keys], [sat_alis[k] for k in keys])
    sat_ll += _jacobian(xf, {k: raw[k] for k in keys}, c.utt2spk)
    plain_ll = T.total_loglik(base, [raw[k] for k in keys], [plain_alis[k] for k in keys])
    assert sat_ll > plain_ll


def _diag_hmm_data(rng, n_utts, dim=3):
    """Frames drawn from one diagonal Gaussian per (unit, state)."""
    means = rng.normal(0, 3, (2, 3, dim))
    std = rng.uniform(0.5, 1.5, (2, 3, dim))
    lex = Lexicon({"A": [("x",)], "B": [("y",)]}, "phoneme")
    feats, trans = {}, {}
    for i in range(n_utts):
        words = [["A", "B"][j] for j in rng.integers(0, 2, 3)]
        frames = []
        for w in words:
            u = 0 if w == "A" else 1
            for s in range(3):
                n = int(rng.integers(3, 8))
                frames.append(means[u, s] + std[u, s] * rng.normal(size=(n, dim)))
        feats[f"u{i:03d}"] = np.vstack(frames)
        trans[f"u{i:03d}"] = words
    return FeatureMap(feats, stage="meannorm"), trans, lex


def test_sat_single_speaker_near_identity(rng):
    feats, trans, lex = _diag_hmm_data(rng, 400)
    u2s = {k: "only" for k in feats}
    model, alis = T.flat_start(feats, trans, lex, XY, boundary_silence=False)
    model, alis, _ = T.em_train_ci(model, feats, trans, lex, alis, T.ci_config(n_iters=8, max_gauss=1),
                                   optional_silence=False)
    _, _, xf, _ = T.train_sat(model, feats, trans, lex, alis, u2s, T.cd_config(n_iters=3, realign_every=100),
                              fmllr_iters=(1,), optional_silence=False)
    W = xf["only"].as_affine()
    assert np.abs(W - np.hstack([np.eye(3), np.zeros((3, 1))])).max() < 1e-2
