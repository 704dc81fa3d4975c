"""Weighted finite-state transducers over the tropical semiring (negative
natural-log weights)."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

EPS = 0
INF = math.inf


class FstError(ValueError):
    pass


class SymbolTable:
    """Bidirectional symbol <-> id map; id 0 is always ``<eps>``."""

    def __init__(self, symbols: Iterable[str] = ()):
        self._syms = ["<eps>"]
        self._ids = {"<eps>": 0}
        for s in symbols:
            self.add(s)

    def add(self, sym: str) -> int:
        if sym not in self._ids:
            self._ids[sym] = len(self._syms)
            self._syms.append(sym)
        return self._ids[sym]

    def __getitem__(self, sym: str) -> int:
        try:
            return self._ids[sym]
        except KeyError:
            raise FstError(f"unknown symbol {sym!r}") from None

    def __contains__(self, sym) -> bool:
        return sym in self._ids

    def __len__(self):
        return len(self._syms)

    def symbol(self, i: int) -> str:
        return self._syms[i]

    def to_text(self) -> str:
        return "".join(f"{s} {i}\n" for i, s in enumerate(self._syms))

    @classmethod
    def from_text(cls, text: str) -> "SymbolTable":
        pairs = sorted((int(i), s) for s, i in (ln.split() for ln in text.splitlines() if ln.strip()))
        if not pairs or pairs[0] != (0, "<eps>") or [i for i, _ in pairs] != list(range(len(pairs))):
            raise FstError("malformed symbol table")
        return cls(s for _, s in pairs[1:])


@dataclass
class Fst:
    """Mutable transducer. Arcs are ``(src, dst, ilabel, olabel, weight)``."""

    n_states: int = 0
    start: int = -1
    arcs: list[tuple[int, int, int, int, float]] = field(default_factory=list)
    finals: dict[int, float] = field(default_factory=dict)

    def add_state(self) -> int:
        self.n_states += 1
        return self.n_states - 1

    def add_arc(self, src: int, dst: int, ilabel: int, olabel: int, weight: float = 0.0):
        if not (0 <= src < self.n_states and 0 <= dst < self.n_states):
            raise FstError(f"arc {src}->{dst} references an undeclared state")
        self.arcs.append((src, dst, int(ilabel), int(olabel), float(weight)))

    def set_final(self, state: int, weight: float = 0.0):
        self.finals[state] = float(weight)

    def out_arcs(self) -> list[list[tuple]]:
        out: list[list[tuple]] = [[] for _ in range(self.n_states)]
        for a in self.arcs:
            out[a[0]].append(a)
        return out

    def arrays(self):
        """Arc columns as numpy arrays: src, dst, ilabel, olabel, weight."""
        if not self.arcs:
            z = np.zeros(0, dtype=np.int64)
            return z, z, z, z, np.zeros(0)
        a = np.array([x[:4] for x in self.arcs], dtype=np.int64)
        w = np.array([x[4] for x in self.arcs])
        return a[:, 0], a[:, 1], a[:, 2], a[:, 3], w

    def check(self):
        if not 0 <= self.start < self.n_states:
            raise FstError("start state does not exist")
        for a in self.arcs:
            if math.isnan(a[4]) or a[4] == -INF:
                raise FstError(f"bad arc weight {a[4]}")

    def connect(self) -> "Fst":
        """Copy with states that are not both reachable and co-reachable removed."""
        out = self.out_arcs()
        fwd = {self.start}
        q = deque([self.start])
        while q:
            s = q.popleft()
            for a in out[s]:
                if a[1] not in fwd:
                    fwd.add(a[1])
                    q.append(a[1])
        inc: list[list[int]] = [[] for _ in range(self.n_states)]
        for a in self.arcs:
            inc[a[1]].append(a[0])
        bwd = set(self.finals)
        q = deque(self.finals)
        while q:
            s = q.popleft()
            for p in inc[s]:
                if p not in bwd:
                    bwd.add(p)
                    q.append(p)
        keep = sorted(fwd & bwd)
        if self.start not in bwd:
            return Fst(1, 0)
        new_id = {s: i for i, s in enumerate(keep)}
        res = Fst(len(keep), new_id[self.start])
        for s, d, i, o, w in self.arcs:
            if s in new_id and d in new_id:
                res.arcs.append((new_id[s], new_id[d], i, o, w))
        res.finals = {new_id[s]: w for s, w in self.finals.items() if s in new_id}
        return res

    def paths(self, max_arcs: int, max_paths: int = 100_000):
        """Enumerate complete paths with at most ``max_arcs`` arcs as
        ``(ilabels, olabels, weight)`` (epsilons dropped from label lists)."""
        out = self.out_arcs()
        res = []
        stack = [(self.start, (), (), 0.0, 0)]
        while stack:
            s, il, ol, w, n = stack.pop()
            if s in self.finals:
                res.append((il, ol, w + self.finals[s]))
                if len(res) > max_paths:
                    raise FstError("too many paths")
            if n == max_arcs:
                continue
            for _, d, i, o, aw in out[s]:
                stack.append((d, il + ((i,) if i else ()), ol + ((o,) if o else ()), w + aw, n + 1))
        return res

    def to_text(self) -> str:
        lines = [f"{s} {d} {i} {o} {float(w)!r}" for s, d, i, o, w in self.arcs]
        lines += [f"{s} {float(w)!r}" for s, w in sorted(self.finals.items())]
        return f"# start {self.start} states {self.n_states}\n" + "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Fst":
        fst = cls()
        rows = []
        for ln in text.splitlines():
            ln = ln.strip()
            if not ln:
                continue
            if ln.startswith("#"):
                parts = ln[1:].split()
                if parts[:1] == ["start"]:
                    fst.start, fst.n_states = int(parts[1]), int(parts[3])
                continue
            rows.append(ln.split())
        for r in rows:
            if len(r) == 5:
                fst.arcs.append((int(r[0]), int(r[1]), int(r[2]), int(r[3]), float(r[4])))
            elif len(r) in (1, 2):
                fst.finals[int(r[0])] = float(r[1]) if len(r) == 2 else 0.0
            else:
                raise FstError(f"malformed FST line: {' '.join(r)}")
        top = max([max(a[0], a[1]) for a in fst.arcs] + list(fst.finals) + [fst.start], default=-1)
        fst.n_states = max(fst.n_states, top + 1)
        if fst.start < 0 and fst.n_states:
            fst.start = 0
        return fst

    def write(self, path, isyms: SymbolTable | None = None, osyms: SymbolTable | None = None):
        p = Path(path)
        p.write_text(self.to_text())
        if isyms is not None:
            p.with_suffix(".isyms").write_text(isyms.to_text())
        if osyms is not None:
            p.with_suffix(".osyms").write_text(osyms.to_text())

    @classmethod
    def read(cls, path) -> "Fst":
        return cls.from_text(Path(path).read_text())


def compose(a: Fst, b: Fst) -> Fst:
    """Tropical composition with a sequencing epsilon filter.

    Output-epsilon moves of ``a`` are taken before input-epsilon moves of
    ``b``, which keeps one path per epsilon interleaving.
    """
    a_out = a.out_arcs()
    b_out = b.out_arcs()
    b_by_in: list[dict[int, list]] = []
    for arcs in b_out:
        d: dict[int, list] = {}
        for arc in arcs:
            d.setdefault(arc[2], []).append(arc)
        b_by_in.append(d)
    res = Fst()
    ids: dict[tuple[int, int, int], int] = {}

    def state(key):
        if key not in ids:
            ids[key] = res.add_state()
            q.append(key)
        return ids[key]

    q: deque = deque()
    res.start = state((a.start, b.start, 0))
    while q:
        key = q.popleft()
        sa, sb, f = key
        src = ids[key]
        if sa in a.finals and sb in b.finals:
            res.set_final(src, a.finals[sa] + b.finals[sb])
        for _, da, ia, oa, wa in a_out[sa]:
            if oa == EPS:
                if f == 0:
                    res.add_arc(src, state((da, sb, 0)), ia, EPS, wa)
                continue
            for _, db, _, ob, wb in b_by_in[sb].get(oa, ()):
                res.add_arc(src, state((da, db, 0)), ia, ob, wa + wb)
        for _, db, _, ob, wb in b_by_in[sb].get(EPS, ()):
            res.add_arc(src, state((sa, db, 1)), EPS, ob, wb)
    return res


def shortest_distance(fst: Fst) -> float:
    """Cost of the best complete path (Bellman-Ford style relaxation)."""
    dist = np.full(fst.n_states, INF)
    dist[fst.start] = 0.0
    src, dst, _, _, w = fst.arrays()
    for _ in range(fst.n_states):
        cand = dist[src] + w
        new = dist.copy()
        np.minimum.at(new, dst, cand)
        if np.array_equal(new, dist):
            break
        dist = new
    return min((dist[s] + fw for s, fw in fst.finals.items()), default=INF)
