"""Staged GMM-HMM training: flat start, context-independent EM, tree-tied
context-dependent EM, LDA+MLLT and speaker adaptive training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..lexicon import Lexicon, UnitSet
from ..transforms import (
    FeatureMap,
    LinearTransform,
    apply_speaker_transforms,
    fmllr_fit,
    lda_fit,
    map_splice,
    mllt_fit,
)
from .gmm import (
    DiagGmmSet,
    GmmStats,
    allocate_gaussians,
    prune_components,
    split_components,
    update_gmms,
)
from .model import (
    AcousticModel,
    Alignment,
    AlignmentError,
    HmmTopology,
    transcript_units,
    viterbi_align,
)
from .tree import ContextStats, TiedStateMap, build_tree, leaf_stats

log = logging.getLogger(__name__)


@dataclass
class StageConfig:
    """EM schedule for one training stage.

    ``max_gauss`` is a per-unit budget when ``per_unit_gauss`` is set (CI
    stage) and a total budget otherwise. Convergence is not tested before
    ``min_iters``.
    """

    n_iters: int = 40
    realign_iters: frozenset[int] = frozenset()
    max_gauss: int = 1000
    per_unit_gauss: bool = False
    inc_until: int | None = None
    max_leaves: int = 2000
    converge_tol: float | None = None
    power: float = 0.2
    min_gauss_occ: float = 20.0
    split_penalty: float = 0.5
    min_iters: int = 0

    def growth_end(self) -> int:
        return self.inc_until if self.inc_until is not None else max(1, (3 * self.n_iters) // 4)


def ci_config(n_iters=40, max_gauss=1000, **kw) -> StageConfig:
    """Realign every iteration for the first ten, then every second one."""
    realign = frozenset(i for i in range(1, n_iters + 1) if i <= 10 or i % 2 == 0)
    return StageConfig(n_iters, realign, max_gauss, per_unit_gauss=True, **kw)


def cd_config(n_iters=35, max_gauss=10_000, max_leaves=2000, realign_every=10,
              converge_tol=1e-4, **kw) -> StageConfig:
    realign = frozenset(range(realign_every, n_iters + 1, realign_every))
    return StageConfig(n_iters, realign, max_gauss, False, max_leaves=max_leaves,
                       converge_tol=converge_tol, **kw)


@dataclass
class StageLog:
    """Per-iteration diagnostics.

    ``ll_before``/``ll_after`` are total log-likelihoods of the same fixed
    alignment around one parameter update; ``edits`` lists what changed the
    model or alignment before ``ll_before`` was taken.
    """

    stage: str
    records: list[dict] = field(default_factory=list)

    def add(self, **rec):
        self.records.append(rec)

    def em_updates(self):
        return [r for r in self.records if "ll_before" in r]

    def check_monotone(self, rtol: float = 1e-8) -> list[dict]:
        bad = []
        for r in self.em_updates():
            if r["ll_after"] < r["ll_before"] - rtol * abs(r["ll_before"]):
                bad.append(r)
        return bad

    def to_dict(self):
        return {"stage": self.stage, "records": self.records}


def _trans_counts(model, alignments):
    U, S = model.topo.n_units, model.topo.n_states
    loop = np.zeros((U, S))
    fwd = np.zeros((U, S))
    for a in alignments:
        np.add.at(fwd, (a.unit[a.fwd], a.state[a.fwd]), 1)
        np.add.at(loop, (a.unit[~a.fwd], a.state[~a.fwd]), 1)
    return loop, fwd


def _trans_ll(model, loop, fwd) -> float:
    return float((loop * model.topo.log_loop).sum() + (fwd * model.topo.log_fwd).sum())


def accumulate(model: AcousticModel, feats: Sequence[np.ndarray], alignments: Sequence[Alignment]) -> GmmStats:
    st = GmmStats(model.gmms.n_components, model.dim)
    for X, a in zip(feats, alignments):
        st.accumulate(model.gmms, X, a.pdf)
    return st


def total_loglik(model, feats, alignments) -> float:
    """Emission plus transition log-likelihood of fixed alignments."""
    ll = sum(float(model.gmms.frame_loglik(X, a.pdf).sum()) for X, a in zip(feats, alignments))
    return ll + _trans_ll(model, *_trans_counts(model, alignments))


def _ci_pdf(u, s, n_states=3):
    return u * n_states + s


def flat_start(features: Mapping[str, np.ndarray], transcripts: Mapping[str, Sequence[str]],
               lexicon: Lexicon, units: UnitSet, boundary_silence: bool = True,
               n_states: int = 3, var_floor_frac: float = 1e-4):
    """Context-independent single-Gaussian model from equal segmentation.

    Each utterance's state sequence (first pronunciations, with silence at
    both ends when ``boundary_silence``) receives T // S frames per state;
    the remainder goes to the final state. Utterances shorter than their
    state sequence are skipped with a warning.
    """
    lexicon.check_units(units)
    alignments: dict[str, Alignment] = {}
    for uid, X in features.items():
        seq = [i for i in transcript_units(transcripts[uid], lexicon, units, boundary_silence)]
        if boundary_silence and units.silence:
            seq = [seq[0]] + [x for x in seq[1:-1] if not x.optional] + [seq[-1]]
            for x in seq:
                x.optional = False
        S = len(seq) * n_states
        T = len(X)
        if T < S:
            log.warning("flat start: skipping %s (%d frames < %d states)", uid, T, S)
            continue
        per = T // S
        idx = np.minimum(np.arange(T) // per, S - 1)
        inst, st = idx // n_states, idx % n_states
        unit = np.array([seq[i].unit for i in inst])
        left = np.array([seq[i].left for i in inst])
        right = np.array([seq[i].right for i in inst])
        fwd = np.ones(T, dtype=bool)
        fwd[:-1] = idx[1:] != idx[:-1]
        alignments[uid] = Alignment(unit, st, _ci_pdf(unit, st, n_states), left, right, fwd)
    if not alignments:
        raise AlignmentError("flat start: no usable utterances")
    allx = np.concatenate([features[k] for k in alignments])
    g_mean, g_var = allx.mean(0), allx.var(0)
    var_floor = var_floor_frac * g_var
    n_pdfs = len(units) * n_states
    D = allx.shape[1]
    means = np.tile(g_mean, (n_pdfs, 1))
    variances = np.tile(g_var, (n_pdfs, 1))
    n = np.zeros(n_pdfs)
    s = np.zeros((n_pdfs, D))
    ss = np.zeros((n_pdfs, D))
    for k, a in alignments.items():
        X = features[k]
        n += np.bincount(a.pdf, minlength=n_pdfs)
        np.add.at(s, a.pdf, X)
        np.add.at(ss, a.pdf, X * X)
    seen = n > 0
    means[seen] = s[seen] / n[seen, None]
    variances[seen] = np.maximum(ss[seen] / n[seen, None] - means[seen] ** 2, var_floor)
    model = AcousticModel(units, HmmTopology(len(units), n_states),
                          TiedStateMap.context_independent(len(units), n_states),
                          DiagGmmSet.single(means, variances), var_floor)
    return model, alignments


def align_all(model, features: Mapping[str, np.ndarray], transcripts, lexicon,
              previous: Mapping[str, Alignment] | None = None,
              optional_silence: bool = True) -> dict[str, Alignment]:
    out = {}
    for uid, X in features.items():
        try:
            out[uid] = viterbi_align(model, X, transcripts[uid], lexicon, optional_silence)
        except AlignmentError as e:
            if previous is not None and uid in previous:
                out[uid] = previous[uid]
            log.warning("alignment failed for %s: %s", uid, e)
    return out


def _gauss_targets(model, cfg: StageConfig, it: int, pdf_occ, init_total: int):
    end = cfg.growth_end()
    if it > end:
        return None
    frac = it / end
    current = model.gmms.counts()
    if cfg.per_unit_gauss:
        targets = current.copy()
        pdf_unit = {p: min(us) for p, us in model.tree.pdf_units().items()}
        for u in range(model.topo.n_units):
            pdfs = np.array(sorted(p for p, uu in pdf_unit.items() if uu == u))
            if len(pdfs) == 0:
                continue
            start = len(pdfs)
            budget = int(round(start + (cfg.max_gauss - start) * frac))
            targets[pdfs] = allocate_gaussians(pdf_occ[pdfs], budget, cfg.power,
                                               cfg.min_gauss_occ, current[pdfs])
        return targets
    budget = int(round(init_total + (cfg.max_gauss - init_total) * frac))
    return allocate_gaussians(pdf_occ, budget, cfg.power, cfg.min_gauss_occ, current)


def run_em(model: AcousticModel, features: Mapping[str, np.ndarray], transcripts, lexicon,
           alignments: Mapping[str, Alignment], cfg: StageConfig, stage_log: StageLog,
           before_iteration: Callable | None = None, optional_silence: bool = True):
    """Viterbi-style EM: optional realignment and mixture growth, then one
    maximum-likelihood update of GMMs and transitions per iteration."""
    alignments = dict(alignments)
    init_total = model.gmms.n_components
    pdf_occ = None
    prev_after = None
    for it in range(1, cfg.n_iters + 1):
        edits = []
        if before_iteration is not None:
            features, changed = before_iteration(it, model, features, alignments)
            if changed:
                edits.append(changed)
        if it in cfg.realign_iters:
            alignments = align_all(model, features, transcripts, lexicon, alignments, optional_silence)
            edits.append("realign")
        if pdf_occ is not None:
            targets = _gauss_targets(model, cfg, it, pdf_occ, init_total)
            if targets is not None and np.any(targets > model.gmms.counts()):
                model.gmms = split_components(model.gmms, targets)
                edits.append("split")
            pruned = prune_components(model.gmms)
            if pruned is not model.gmms:
                model.gmms = pruned
                edits.append("prune")
        keys = [k for k in alignments if k in features]
        feats = [features[k] for k in keys]
        alis = [alignments[k] for k in keys]
        stats = accumulate(model, feats, alis)
        loop, fwd = _trans_counts(model, alis)
        ll_before = stats.loglik + _trans_ll(model, loop, fwd)
        model.gmms = update_gmms(model.gmms, stats, model.var_floor)
        model.topo.update(loop, fwd)
        ll_after = total_loglik(model, feats, alis)
        pdf_occ = np.add.reduceat(stats.occ, model.gmms.starts[:-1])
        frames = stats.frames
        stage_log.add(iter=it, edits=edits, ll_before=ll_before, ll_after=ll_after,
                      frames=frames, n_gauss=int(model.gmms.n_components))
        log.info("%s iter %d: ll/frame %.4f -> %.4f (%d gauss) %s", stage_log.stage, it,
                 ll_before / frames, ll_after / frames, model.gmms.n_components, ",".join(edits))
        if (cfg.converge_tol is not None and prev_after is not None
                and it > max(cfg.growth_end(), cfg.min_iters) and not edits
                and abs(ll_after - prev_after) / frames < cfg.converge_tol):
            stage_log.add(iter=it, converged=True)
            break
        prev_after = ll_after
    return model, alignments


def em_train_ci(model, features, transcripts, lexicon, alignments, cfg: StageConfig | None = None,
                optional_silence: bool = True):
    cfg = cfg or ci_config()
    slog = StageLog("ci")
    model, alignments = run_em(model, features, transcripts, lexicon, alignments, cfg, slog,
                               optional_silence=optional_silence)
    return model, alignments, slog


def context_stats(features, alignments) -> ContextStats:
    dim = next(iter(features.values())).shape[1]
    cs = ContextStats(dim)
    for k, a in alignments.items():
        if k in features:
            cs.accumulate(a, features[k])
    return cs


def init_from_tree(units: UnitSet, topo: HmmTopology, tree: TiedStateMap, cs: ContextStats,
                   var_floor) -> AcousticModel:
    ls = leaf_stats(tree, cs)
    D = cs.dim
    n = ls[:, 0]
    tot = ls.sum(0)
    g_mean = tot[1:D + 1] / tot[0]
    g_var = np.maximum(tot[D + 1:] / tot[0] - g_mean ** 2, var_floor)
    means = np.tile(g_mean, (tree.n_pdfs, 1))
    variances = np.tile(g_var, (tree.n_pdfs, 1))
    seen = n > 0
    means[seen] = ls[seen, 1:D + 1] / n[seen, None]
    variances[seen] = np.maximum(ls[seen, D + 1:] / n[seen, None] - means[seen] ** 2, var_floor)
    return AcousticModel(units, HmmTopology(topo.n_units, topo.n_states, topo.loop.copy()),
                         tree, DiagGmmSet.single(means, variances), var_floor)


def train_cd(prev_model: AcousticModel, features, transcripts, lexicon, alignments,
             cfg: StageConfig | None = None, stage: str = "cd", var_floor=None,
             optional_silence: bool = True):
    """Build a tied-state tree from the previous alignment, initialise one
    Gaussian per leaf and run EM."""
    cfg = cfg or cd_config()
    cs = context_stats(features, alignments)
    if var_floor is None:
        allx = np.concatenate([features[k] for k in alignments if k in features])
        var_floor = 1e-4 * allx.var(0)
    tree = build_tree(cs, len(prev_model.units), cfg.max_leaves, n_states=prev_model.topo.n_states,
                      var_floor=var_floor, no_split_units=prev_model.silence_ids,
                      penalty=cfg.split_penalty)
    model = init_from_tree(prev_model.units, prev_model.topo, tree, cs, var_floor)
    alis = {k: a.relabel(tree) for k, a in alignments.items()}
    slog = StageLog(stage)
    slog.add(tree_leaves=tree.n_leaves, n_pdfs=tree.n_pdfs)
    model, alis = run_em(model, features, transcripts, lexicon, alis, cfg, slog,
                         optional_silence=optional_silence)
    return model, alis, slog


def train_lda_mllt(prev_model, base_features: FeatureMap, transcripts, lexicon, alignments,
                   cfg: StageConfig | None = None, lda_dim: int = 40, context: int = 7,
                   mllt_iters: int = 10, refine_iters: int = 4, optional_silence: bool = True):
    """Splice +/-context frames, reduce with LDA over tied states, train a
    new tied-state system, then estimate MLLT once and refine.

    Returns the model, alignments, the combined LDA+MLLT transform and log.
    """
    cfg = cfg or cd_config(max_leaves=2500, max_gauss=15_000)
    spliced = map_splice(base_features, context, context)
    keys = [k for k in alignments if k in spliced]
    lda = lda_fit([spliced[k] for k in keys], [alignments[k].pdf for k in keys], lda_dim)
    feats = FeatureMap({k: lda(v) for k, v in spliced.items()}, stage="lda")
    model, alis, slog = train_cd(prev_model, feats, transcripts, lexicon, alignments, cfg,
                                 stage="lda_mllt", optional_silence=optional_silence)
    mllt = mllt_fit(model, [feats[k] for k in alis], [alis[k] for k in alis], mllt_iters)
    slog.add(mllt_objective=mllt.trace)
    feats = FeatureMap({k: mllt(v) for k, v in feats.items()}, stage="mllt")
    refine = StageConfig(refine_iters, frozenset({1}), model.gmms.n_components, False,
                         inc_until=0, max_leaves=cfg.max_leaves)
    model, alis = run_em(model, feats, transcripts, lexicon, alis, refine, slog,
                         optional_silence=optional_silence)
    combined = lda.then(mllt)
    combined.trace = {"lda_eigenvalues": lda.trace, "mllt_objective": mllt.trace}
    return model, alis, combined, slog


def estimate_speaker_transforms(model, features, alignments, utt2spk, n_iters=10,
                                init: Mapping[str, LinearTransform] | None = None,
                                min_frames: int | None = None) -> dict[str, LinearTransform]:
    by_spk: dict[str, list[str]] = {}
    for k in alignments:
        if k in features:
            by_spk.setdefault(utt2spk[k], []).append(k)
    out = {}
    for spk, keys in sorted(by_spk.items()):
        out[spk] = fmllr_fit(model, [features[k] for k in keys], [alignments[k] for k in keys],
                             n_iters, min_frames, (init or {}).get(spk))
    return out


def train_sat(model: AcousticModel, features: FeatureMap, transcripts, lexicon, alignments,
              utt2spk: Mapping[str, str], cfg: StageConfig | None = None,
              fmllr_iters: Sequence[int] = (1, 3, 5, 10), fmllr_inner: int = 5,
              optional_silence: bool = True):
    """Alternate per-speaker fMLLR estimation with EM on transformed features.

    Tree and Gaussian budget carry over from the input model. Transform
    updates count as edits, so each logged update compares likelihoods on
    the same transformed features.
    """
    cfg = cfg or cd_config(max_leaves=model.tree.n_leaves, max_gauss=model.gmms.n_components)
    cfg = StageConfig(cfg.n_iters, cfg.realign_iters, model.gmms.n_components, False,
                      inc_until=0, max_leaves=model.tree.n_leaves, converge_tol=cfg.converge_tol,
                      min_iters=max(fmllr_iters, default=0))
    slog = StageLog("sat")
    transforms: dict[str, LinearTransform] = {}
    state = {"feats": features}

    def hook(it, mdl, feats, alis):
        if it not in fmllr_iters:
            return state["feats"], None
        new = estimate_speaker_transforms(mdl, features, alis, utt2spk, fmllr_inner, transforms)
        transforms.update(new)
        slog.add(iter=it, fmllr={s: t.trace for s, t in new.items()})
        state["feats"] = apply_speaker_transforms(features, transforms, utt2spk)
        return state["feats"], "fmllr"

    model, alis = run_em(model, features, transcripts, lexicon, alignments, cfg, slog,
                         before_iteration=hook, optional_silence=optional_silence)
    return model, alis, transforms, slog
