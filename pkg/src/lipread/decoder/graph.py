"""Decoding graph construction: grammar G, lexicon L with word-internal
context-dependent units (C), composition, and HMM expansion (H)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..gmmhmm.tree import BOUNDARY
from ..lexicon import BOS, EOS, BigramLm, Lexicon
from .fst import EPS, Fst, FstError, SymbolTable, compose


class GraphError(FstError):
    pass


def grammar_fst(lm: BigramLm, words: SymbolTable) -> Fst:
    """Backoff bigram acceptor.

    One state per history plus a unigram state reached by epsilon arcs
    weighted with the backoff cost. Since every explicit bigram is at least
    as likely as its backed-off estimate, the cheapest path for any word
    string costs exactly its LM cost.
    """
    g = Fst()
    hist = {h: g.add_state() for h in [BOS] + list(lm.vocab)}
    uni = g.add_state()
    g.start = hist[BOS]
    for w in lm.vocab:
        g.add_arc(uni, hist[w], words[w], words[w], -lm.unigram[w])
    g.set_final(uni, -lm.unigram[EOS])
    for h, s in hist.items():
        explicit = lm.bigram.get(h, {})
        for w, lp in explicit.items():
            if w == EOS:
                g.set_final(s, -lp)
            else:
                g.add_arc(s, hist[w], words[w], words[w], -lp)
        g.add_arc(s, uni, EPS, EPS, -lm.backoff.get(h, 0.0))
    return g


@dataclass(frozen=True)
class CdUnit:
    unit: int
    left: int
    right: int


def lexicon_fst(lexicon: Lexicon, units, words: SymbolTable, words_in_lm,
                optional_silence: bool = True):
    """L with context-dependent unit input labels and the word on the first arc.

    Returns ``(fst, cd_units)`` where ``cd_units[i - 1]`` is the unit of input
    label ``i``. Optional silence is a zero-weight self-loop at the loop state.
    """
    cd: dict[CdUnit, int] = {}

    def label(c: CdUnit) -> int:
        if c not in cd:
            cd[c] = len(cd) + 1
        return cd[c]

    fst = Fst()
    loop = fst.add_state()
    fst.start = loop
    fst.set_final(loop)
    for word, pron in lexicon.items():
        if word not in words_in_lm:
            continue
        try:
            ids = [units.index(u) for u in pron]
        except ValueError:
            raise GraphError(f"word {word!r} uses a unit the model does not have") from None
        src = loop
        for j, u in enumerate(ids):
            c = CdUnit(u, ids[j - 1] if j > 0 else BOUNDARY, ids[j + 1] if j + 1 < len(ids) else BOUNDARY)
            dst = loop if j + 1 == len(ids) else fst.add_state()
            fst.add_arc(src, dst, label(c), words[word] if j == 0 else EPS)
            src = dst
    if optional_silence and units.silence:
        sil = units.index(units.primary_silence)
        fst.add_arc(loop, loop, label(CdUnit(sil, BOUNDARY, BOUNDARY)), EPS)
    return fst, list(cd)


@dataclass
class TransitionTable:
    """Per transition-id (>= 1) pdf, HMM position and raw transition cost."""

    pdf: np.ndarray
    unit: np.ndarray
    state: np.ndarray
    left: np.ndarray
    right: np.ndarray
    is_loop: np.ndarray
    cost: np.ndarray

    def to_text(self) -> str:
        rows = ["tid pdf unit state left right loop cost"]
        for t in range(1, len(self.pdf)):
            rows.append(f"{t} {self.pdf[t]} {self.unit[t]} {self.state[t]} {self.left[t]} "
                        f"{self.right[t]} {int(self.is_loop[t])} {float(self.cost[t])!r}")
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TransitionTable":
        rows = [ln.split() for ln in text.splitlines()[1:] if ln.strip()]
        n = len(rows) + 1
        cols = np.zeros((7, n))
        for r in rows:
            cols[:, int(r[0])] = [float(x) for x in r[1:]]
        i = cols[:6].astype(np.int64)
        return cls(i[0], i[1], i[2], i[3], i[4], i[5].astype(bool), cols[6])


@dataclass
class DecodingGraph:
    fst: Fst
    trans: TransitionTable
    words: SymbolTable
    n_pdfs: int

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.fst.write(d / "HCLG.fst")
        (d / "words.txt").write_text(self.words.to_text())
        (d / "transitions.txt").write_text(self.trans.to_text())
        (d / "info.txt").write_text(f"n_pdfs {self.n_pdfs}\n")

    @classmethod
    def load(cls, directory) -> "DecodingGraph":
        d = Path(directory)
        if not (d / "HCLG.fst").exists():
            raise GraphError(f"missing artifact: graph ({d})")
        info = dict(ln.split() for ln in (d / "info.txt").read_text().splitlines() if ln.strip())
        return cls(Fst.read(d / "HCLG.fst"), TransitionTable.from_text((d / "transitions.txt").read_text()),
                   SymbolTable.from_text((d / "words.txt").read_text()), int(info["n_pdfs"]))


def build_graph(lexicon: Lexicon, lm: BigramLm, model, optional_silence: bool = True) -> DecodingGraph:
    """H o C o L o G for ``model`` (anything with ``units``, ``tree``, ``topo``).

    Graph weights carry only LM costs (silence and pronunciation choices are
    free); transition and emission costs are added by the decoder through
    the transition-id input labels. A transition-id arc consumes one frame
    scored by the pdf of its source HMM state, then either stays (self-loop)
    or moves on.
    """
    missing = [w for w in lm.vocab if w not in lexicon]
    if missing:
        raise GraphError(f"LM word {missing[0]!r} is not in the lexicon")
    words = SymbolTable(sorted(lm.vocab))
    G = grammar_fst(lm, words)
    L, cd_units = lexicon_fst(lexicon, model.units, words, set(lm.vocab), optional_silence)
    LG = compose(L, G).connect()

    n_states = model.topo.n_states
    log_loop, log_fwd = model.topo.log_loop, model.topo.log_fwd
    tid_of: dict[tuple, int] = {}
    cols: list[tuple] = [(0, 0, 0, 0, 0, False, 0.0)]

    def tid(c: CdUnit, s: int, loop: bool) -> int:
        key = (c, s, loop)
        if key not in tid_of:
            pdf = model.tree.resolve(c.unit, s, c.left, c.right)
            cost = -(log_loop if loop else log_fwd)[c.unit, s]
            tid_of[key] = len(cols)
            cols.append((pdf, c.unit, s, c.left, c.right, loop, cost))
        return tid_of[key]

    H = Fst(LG.n_states, LG.start, finals=dict(LG.finals))
    for src, dst, il, ol, w in LG.arcs:
        if il == EPS:
            H.add_arc(src, dst, EPS, ol, w)
            continue
        c = cd_units[il - 1]
        chain = [H.add_state() for _ in range(n_states)]
        H.add_arc(src, chain[0], EPS, ol, w)
        for s, q in enumerate(chain):
            nxt = chain[s + 1] if s + 1 < n_states else dst
            H.add_arc(q, nxt, tid(c, s, False), EPS)
    # self-loops last
    loops = []
    for src, _, il, _, _ in H.arcs:
        if il != EPS:
            _, u, s, left, right, _, _ = cols[il]
            loops.append((src, src, tid(CdUnit(u, left, right), s, True), EPS, 0.0))
    H.arcs.extend(loops)
    a = np.array(cols, dtype=object)
    trans = TransitionTable(a[:, 0].astype(np.int64), a[:, 1].astype(np.int64), a[:, 2].astype(np.int64),
                            a[:, 3].astype(np.int64), a[:, 4].astype(np.int64), a[:, 5].astype(bool),
                            a[:, 6].astype(np.float64))
    return DecodingGraph(H, trans, words, model.tree.n_pdfs)
