"""Edit-distance scoring, confusion matrices and experiment summaries."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .lexicon import P2VMap

MATCH, SUB, DEL, INS = "match", "sub", "del", "ins"


class ScoringError(ValueError):
    pass


@dataclass(frozen=True)
class AlignmentOps:
    ops: tuple[tuple[str, str | None, str | None], ...]

    def __iter__(self):
        return iter(self.ops)

    def __len__(self):
        return len(self.ops)

    def counts(self) -> Counter:
        return Counter(op for op, _, _ in self.ops)

    @property
    def distance(self) -> int:
        c = self.counts()
        return c[SUB] + c[DEL] + c[INS]

    @property
    def n_ref(self) -> int:
        c = self.counts()
        return c[MATCH] + c[SUB] + c[DEL]

    def ref(self) -> list[str]:
        return [r for op, r, _ in self.ops if op != INS]

    def hyp(self) -> list[str]:
        return [h for op, _, h in self.ops if op != DEL]


def align_sequences(ref: Sequence[str], hyp: Sequence[str]) -> AlignmentOps:
    """Minimum edit distance alignment with unit costs.

    Among equal-cost alignments the traceback prefers match, then
    substitution, then deletion, then insertion.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(diag, d[i - 1, j] + 1, d[i, j - 1] + 1)
    ops = []
    i, j = n, m
    while i or j:
        if i and j and ref[i - 1] == hyp[j - 1] and d[i, j] == d[i - 1, j - 1]:
            ops.append((MATCH, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i and j and d[i, j] == d[i - 1, j - 1] + 1:
            ops.append((SUB, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i and d[i, j] == d[i - 1, j] + 1:
            ops.append((DEL, ref[i - 1], None))
            i -= 1
        else:
            ops.append((INS, None, hyp[j - 1]))
            j -= 1
    return AlignmentOps(tuple(reversed(ops)))


def _check_ids(refs: Mapping, hyps: Mapping):
    if set(refs) != set(hyps):
        missing = sorted(set(refs) ^ set(hyps))
        raise ScoringError(f"utterance ids differ, e.g. {missing[0]!r}")


def error_counts(refs: Mapping[str, Sequence[str]], hyps: Mapping[str, Sequence[str]]) -> dict[str, int]:
    _check_ids(refs, hyps)
    tot = Counter()
    for k in sorted(refs):
        tot.update(align_sequences(refs[k], hyps[k]).counts())
    return {"N": tot[MATCH] + tot[SUB] + tot[DEL], "S": tot[SUB], "D": tot[DEL], "I": tot[INS]}


def accuracy(refs: Mapping[str, Sequence[str]], hyps: Mapping[str, Sequence[str]]) -> float:
    """Corpus accuracy (N - S - D - I) / N * 100."""
    c = error_counts(refs, hyps)
    if c["N"] == 0:
        raise ScoringError("no reference tokens")
    return 100.0 * (c["N"] - c["S"] - c["D"] - c["I"]) / c["N"]


def utterance_accuracies(refs, hyps) -> dict[str, float]:
    _check_ids(refs, hyps)
    out = {}
    for k in sorted(refs):
        a = align_sequences(refs[k], hyps[k])
        if a.n_ref:
            out[k] = 100.0 * (a.n_ref - a.distance) / a.n_ref
    return out


@dataclass
class ConfusionMatrix:
    units: list[str]
    counts: np.ndarray          # ref x hyp over matches and substitutions
    deletions: np.ndarray       # per ref unit
    insertions: np.ndarray      # per hyp unit

    def normalized(self) -> np.ndarray:
        rows = self.counts.sum(1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros_like(self.counts, dtype=float), where=rows > 0)

    def to_tsv(self, normalize: bool = False) -> str:
        m = self.normalized() if normalize else self.counts
        fmt = (lambda x: f"{x:.4f}") if normalize else (lambda x: str(int(x)))
        lines = ["ref\\hyp\t" + "\t".join(self.units) + "\t<del>"]
        for i, u in enumerate(self.units):
            lines.append(u + "\t" + "\t".join(fmt(x) for x in m[i]) + f"\t{int(self.deletions[i])}")
        lines.append("<ins>\t" + "\t".join(str(int(x)) for x in self.insertions) + "\t0")
        return "\n".join(lines) + "\n"


def confusion_matrix(alignments: Iterable[AlignmentOps], units: Sequence[str] | None = None) -> ConfusionMatrix:
    alignments = list(alignments)
    if units is None:
        units = sorted({t for a in alignments for _, r, h in a for t in (r, h) if t is not None})
    idx = {u: i for i, u in enumerate(units)}
    n = len(units)
    cm = np.zeros((n, n), dtype=np.int64)
    dels = np.zeros(n, dtype=np.int64)
    ins = np.zeros(n, dtype=np.int64)
    for a in alignments:
        for op, r, h in a:
            if op in (MATCH, SUB):
                cm[idx[r], idx[h]] += 1
            elif op == DEL:
                dels[idx[r]] += 1
            else:
                ins[idx[h]] += 1
    return ConfusionMatrix(list(units), cm, dels, ins)


def map_hyp_to_visemes(hyp: Sequence[str], p2v: P2VMap) -> list[str]:
    return [p2v[u] for u in hyp]


# -- summaries ----------------------------------------------------------------

CELL_KEYS = ("scenario", "features", "model", "units")


@dataclass
class RunResult:
    """One experiment cell: reference/hypothesis token sequences per
    utterance at unit and word level."""

    scenario: str
    features: str
    model: str
    units: str
    word_refs: Mapping[str, Sequence[str]]
    word_hyps: Mapping[str, Sequence[str]]
    unit_refs: Mapping[str, Sequence[str]]
    unit_hyps: Mapping[str, Sequence[str]]

    @property
    def key(self) -> tuple[str, str, str, str]:
        return (self.scenario, self.features, self.model, self.units)


def _stderr(values) -> float:
    v = np.asarray(list(values), dtype=float)
    if len(v) < 2:
        return 0.0
    return float(v.std(ddof=1) / math.sqrt(len(v)))


def summarize(runs: Iterable[RunResult], expected_cells: Iterable[tuple] | None = None) -> dict:
    """Unit and word accuracy per cell with standard errors over
    per-utterance accuracies; absent expected cells are listed, not fatal."""
    cells = {}
    for r in runs:
        ua = utterance_accuracies(r.unit_refs, r.unit_hyps)
        wa = utterance_accuracies(r.word_refs, r.word_hyps)
        cells[r.key] = {
            "unit_acc": accuracy(r.unit_refs, r.unit_hyps), "unit_se": _stderr(ua.values()),
            "word_acc": accuracy(r.word_refs, r.word_hyps), "word_se": _stderr(wa.values()),
            "n_utts": len(r.word_refs),
        }
    missing = [c for c in (expected_cells or []) if tuple(c) not in cells]
    return {"cells": cells, "missing": missing}


def report_text(summary: dict) -> str:
    lines = []
    for key, c in sorted(summary["cells"].items()):
        lines.append("[" + " ".join(key) + "]")
        lines.append(f"unit_accuracy {c['unit_acc']:.2f} +/- {c['unit_se']:.2f}")
        lines.append(f"word_accuracy {c['word_acc']:.2f} +/- {c['word_se']:.2f}")
        lines.append(f"utterances {c['n_utts']}")
        lines.append("")
    for m in summary["missing"]:
        lines.append("missing " + " ".join(m))
    return "\n".join(lines).rstrip() + "\n"


def report_tsv(summary: dict) -> str:
    """Plot data: one row per cell, unit accuracy on x and word accuracy on y."""
    lines = ["scenario\tfeatures\tmodel\tunits\tunit_acc\tunit_se\tword_acc\tword_se"]
    for key, c in sorted(summary["cells"].items()):
        lines.append("\t".join(key) + f"\t{c['unit_acc']:.4f}\t{c['unit_se']:.4f}"
                     f"\t{c['word_acc']:.4f}\t{c['word_se']:.4f}")
    return "\n".join(lines) + "\n"


def select_scale(refs: Mapping[str, Sequence[str]], hyps_by_scale: Mapping[float, Mapping[str, Sequence[str]]]):
    """LM scale with the highest word accuracy (lowest error); ties go to the
    smallest scale. Returns ``(scale, accuracy, all accuracies)``."""
    accs = {s: accuracy(refs, h) for s, h in hyps_by_scale.items()}
    best = min(accs, key=lambda s: (-accs[s], s))
    return best, accs[best], accs
