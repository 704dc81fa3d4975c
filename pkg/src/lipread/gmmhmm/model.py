"""HMM topology, acoustic model container and forced alignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import archive
from ..lexicon import Lexicon, UnitSet
from .gmm import DiagGmmSet
from .tree import BOUNDARY, TiedStateMap


class AlignmentError(ValueError):
    pass


@dataclass
class HmmTopology:
    """Left-to-right HMMs with self-loops and no skips.

    ``loop[u, s]`` is the self-loop probability of state ``s`` of unit ``u``;
    the remaining mass moves to the next state (or leaves the unit).
    """

    n_units: int
    n_states: int = 3
    loop: np.ndarray | None = None

    def __post_init__(self):
        if self.loop is None:
            self.loop = np.full((self.n_units, self.n_states), 0.75)
        self.loop = np.asarray(self.loop, dtype=np.float64)

    @property
    def log_loop(self) -> np.ndarray:
        return np.log(self.loop)

    @property
    def log_fwd(self) -> np.ndarray:
        return np.log1p(-self.loop)

    def update(self, loop_counts, fwd_counts, floor: float = 0.01):
        """ML re-estimate from transition counts; unseen states keep theirs."""
        tot = loop_counts + fwd_counts
        seen = tot > 0
        p = self.loop.copy()
        p[seen] = loop_counts[seen] / tot[seen]
        self.loop = np.clip(p, floor, 1 - floor)


@dataclass
class AcousticModel:
    units: UnitSet
    topo: HmmTopology
    tree: TiedStateMap
    gmms: DiagGmmSet
    var_floor: np.ndarray

    @property
    def dim(self) -> int:
        return self.gmms.dim

    @property
    def n_pdfs(self) -> int:
        return self.tree.n_pdfs

    @property
    def silence_ids(self) -> set[int]:
        return {self.units.index(u) for u in self.units.silence}

    def save(self, path):
        arrays = {
            "weights": self.gmms.weights, "means": self.gmms.means, "vars": self.gmms.vars,
            "pdf_of": self.gmms.pdf_of, "loop": self.topo.loop, "var_floor": self.var_floor,
        }
        meta = {
            "kind": "gmm",
            "units": list(self.units.units), "unit_kind": self.units.kind,
            "silence": sorted(self.units.silence), "n_states": self.topo.n_states,
            "tree": self.tree.to_records(),
        }
        archive.save_container(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "AcousticModel":
        a, meta = archive.load_container(path)
        if meta.get("kind") != "gmm":
            raise archive.ArchiveError(f"{path}: not a GMM model")
        units = UnitSet(tuple(meta["units"]), meta["unit_kind"], frozenset(meta["silence"]))
        tree = TiedStateMap.from_records(meta["tree"])
        gmms = DiagGmmSet(a["weights"], a["means"], a["vars"], a["pdf_of"], tree.n_pdfs)
        topo = HmmTopology(len(units), meta["n_states"], a["loop"])
        return cls(units, topo, tree, gmms, a["var_floor"])


@dataclass
class Alignment:
    """Per-frame unit index, state position, pdf-id, word-internal context,
    and whether the frame's outgoing transition leaves its state."""

    unit: np.ndarray
    state: np.ndarray
    pdf: np.ndarray
    left: np.ndarray
    right: np.ndarray
    fwd: np.ndarray
    score: float = float("nan")

    def __len__(self):
        return len(self.unit)

    def to_matrix(self) -> np.ndarray:
        return np.stack([self.unit, self.state, self.pdf, self.left, self.right], 1).astype(float)

    @classmethod
    def from_matrix(cls, m) -> "Alignment":
        m = np.asarray(m).astype(np.int64)
        unit, state, pdf, left, right = m.T
        change = np.ones(len(m), dtype=bool)
        change[:-1] = (unit[1:] != unit[:-1]) | (state[1:] != state[:-1])
        return cls(unit, state, pdf, left, right, change)

    def unit_sequence(self) -> list[int]:
        starts = np.flatnonzero((self.state == 0) & np.r_[True, self.fwd[:-1]])
        return [int(self.unit[i]) for i in starts]

    def relabel(self, tree: TiedStateMap) -> "Alignment":
        pdf = np.array([tree.resolve(u, s, l, r) for u, s, l, r in
                        zip(self.unit, self.state, self.left, self.right)], dtype=np.int64)
        return Alignment(self.unit, self.state, pdf, self.left, self.right, self.fwd, self.score)


def write_alignments(alis: dict[str, Alignment], path):
    archive.write_feature_archive({k: a.to_matrix() for k, a in alis.items()}, path)


def read_alignments(path) -> dict[str, Alignment]:
    return {k: Alignment.from_matrix(m) for k, m in archive.read_feature_archive(path).items()}


# -- alignment graphs ---------------------------------------------------------

@dataclass
class UnitInstance:
    unit: int
    left: int
    right: int
    optional: bool = False


def transcript_units(transcript: Sequence[str], lexicon: Lexicon, units: UnitSet,
                     optional_silence: bool = True) -> list[UnitInstance]:
    """Linear unit sequence for a transcript using each word's first
    pronunciation, with optional silence at the edges and between words."""
    sil = units.index(units.primary_silence) if (optional_silence and units.silence) else None
    seq: list[UnitInstance] = []
    for i, w in enumerate(transcript):
        if w not in lexicon:
            raise AlignmentError(f"word {w!r} not in lexicon")
        if sil is not None:
            seq.append(UnitInstance(sil, BOUNDARY, BOUNDARY, True))
        pron = [units.index(u) for u in lexicon[w][0]]
        for j, u in enumerate(pron):
            left = pron[j - 1] if j > 0 else BOUNDARY
            right = pron[j + 1] if j + 1 < len(pron) else BOUNDARY
            seq.append(UnitInstance(u, left, right))
    if sil is not None:
        seq.append(UnitInstance(sil, BOUNDARY, BOUNDARY, True))
    return seq


@dataclass
class StateGraph:
    """HMM states of a linearised transcript.

    ``preds[j]`` lists states that may precede ``j`` via a forward
    transition; self-loops are implicit.
    """

    unit: np.ndarray
    state: np.ndarray
    left: np.ndarray
    right: np.ndarray
    preds: list[list[int]]
    initial: list[int]
    final: list[int]

    @property
    def n_states(self) -> int:
        return len(self.unit)

    @property
    def min_frames(self) -> int:
        """Frames on the shortest complete path."""
        n = self.n_states
        best = np.full(n, np.inf)
        for j in range(n):
            if j in self.initial:
                best[j] = 1
            for i in self.preds[j]:
                best[j] = min(best[j], best[i] + 1)
        return int(min(best[f] for f in self.final))


def build_state_graph(seq: list[UnitInstance], n_states: int = 3) -> StateGraph:
    if not any(not x.optional for x in seq):
        raise AlignmentError("transcript has no mandatory units")
    unit, state, left, right, preds = [], [], [], [], []
    last_of: list[int] = []
    for i, inst in enumerate(seq):
        base = len(unit)
        for s in range(n_states):
            unit.append(inst.unit)
            state.append(s)
            left.append(inst.left)
            right.append(inst.right)
            if s > 0:
                preds.append([base + s - 1])
                continue
            p = []
            k = i - 1
            while k >= 0:
                p.append(last_of[k])
                if not seq[k].optional:
                    break
                k -= 1
            preds.append(sorted(p))
        last_of.append(base + n_states - 1)
    initial, final = [], []
    for i, inst in enumerate(seq):
        initial.append(i * n_states)
        if not inst.optional:
            break
    for i in range(len(seq) - 1, -1, -1):
        final.append(last_of[i])
        if not seq[i].optional:
            break
    return StateGraph(np.array(unit), np.array(state), np.array(left), np.array(right),
                      preds, sorted(initial), sorted(final))


def viterbi(emit: np.ndarray, log_loop: np.ndarray, log_fwd: np.ndarray,
            preds: list[list[int]], initial: Sequence[int], final: Sequence[int]):
    """Best state path through a self-loop graph.

    Path score = sum of emissions + transitions taken between frames + the
    forward (exit) transition of the last state. Returns ``(path, score)``;
    score is ``-inf`` when no path of length T exists.
    """
    T, S = emit.shape
    K = max(1, max((len(p) for p in preds), default=1))
    P = np.full((S, K), S, dtype=np.int64)
    for j, p in enumerate(preds):
        P[j, :len(p)] = p
    fwd_ext = np.append(log_fwd, -np.inf)
    trans_in = fwd_ext[P]
    delta = np.full(S + 1, -np.inf)
    delta[list(initial)] = emit[0, list(initial)]
    back = np.zeros((T, S), dtype=np.int64)
    ar = np.arange(S)
    for t in range(1, T):
        stay = delta[:S] + log_loop
        move = delta[P] + trans_in
        k = np.argmax(move, axis=1)
        mv = move[ar, k]
        use_stay = stay >= mv
        new = np.where(use_stay, stay, mv) + emit[t]
        back[t] = np.where(use_stay, ar, P[ar, k])
        delta[:S] = new
    final = list(final)
    end = delta[final] + log_fwd[final]
    j = int(np.argmax(end))
    score = float(end[j])
    if not np.isfinite(score):
        return None, -np.inf
    path = np.empty(T, dtype=np.int64)
    path[-1] = final[j]
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, score


def path_score(path, emit, log_loop, log_fwd) -> float:
    """Score of an explicit state path (used to compare alignments)."""
    path = np.asarray(path)
    T = len(path)
    s = float(emit[np.arange(T), path].sum())
    for t in range(T - 1):
        s += log_loop[path[t]] if path[t + 1] == path[t] else log_fwd[path[t]]
    return s + float(log_fwd[path[-1]])


def graph_transitions(model: AcousticModel, graph: StateGraph):
    return model.topo.log_loop[graph.unit, graph.state], model.topo.log_fwd[graph.unit, graph.state]


def graph_pdfs(model: AcousticModel, graph: StateGraph) -> np.ndarray:
    return np.array([model.tree.resolve(u, s, l, r) for u, s, l, r in
                     zip(graph.unit, graph.state, graph.left, graph.right)], dtype=np.int64)


def alignment_from_path(graph: StateGraph, pdfs: np.ndarray, path: np.ndarray, score: float) -> Alignment:
    fwd = np.ones(len(path), dtype=bool)
    fwd[:-1] = path[1:] != path[:-1]
    return Alignment(graph.unit[path], graph.state[path], pdfs[path], graph.left[path],
                     graph.right[path], fwd, score)


def viterbi_align(model: AcousticModel, features: np.ndarray, transcript: Sequence[str],
                  lexicon: Lexicon, optional_silence: bool = True) -> Alignment:
    """Forced alignment of one utterance to its transcript."""
    seq = transcript_units(transcript, lexicon, model.units, optional_silence)
    graph = build_state_graph(seq, model.topo.n_states)
    if len(features) < graph.min_frames:
        raise AlignmentError(
            f"no path: {len(features)} frames for a {graph.min_frames}-state transcript")
    pdfs = graph_pdfs(model, graph)
    uniq, inv = np.unique(pdfs, return_inverse=True)
    ll = model.gmms.loglik_subset(features, uniq)
    emit = ll[:, inv]
    loop, fwd = graph_transitions(model, graph)
    path, score = viterbi(emit, loop, fwd, graph.preds, graph.initial, graph.final)
    if path is None:
        raise AlignmentError("no path through the alignment graph")
    return alignment_from_path(graph, pdfs, path, score)
