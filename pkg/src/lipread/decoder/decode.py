"""Frame-synchronous Viterbi token passing with lattice generation, and
lattice best-path search / LM-scale rescoring."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from ..gmmhmm.model import Alignment
from .fst import EPS, Fst, FstError, SymbolTable
from .graph import DecodingGraph

INF = math.inf


class DecodeError(FstError):
    pass


class GmmScorer:
    """Per-frame log-likelihood of every pdf under a GMM acoustic model."""

    def __init__(self, model):
        self.model = model

    @property
    def n_pdfs(self) -> int:
        return self.model.gmms.n_pdfs

    def __call__(self, X) -> np.ndarray:
        return self.model.gmms.loglik(X)


@dataclass
class Lattice:
    """Acyclic state-level lattice.

    Nodes are (frame, graph-state) pairs numbered in topological order.
    Arcs keep the unscaled model cost (negative log transition plus
    emission likelihood) apart from the LM cost so paths can be re-ranked
    for any LM scale. Emitting arcs (``tid > 0``) span one frame.
    """

    n_frames: int
    node_time: np.ndarray
    node_state: np.ndarray
    node_key: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    model: np.ndarray
    lm: np.ndarray
    word: np.ndarray
    tid: np.ndarray
    final: dict[int, float]
    start: int
    words: SymbolTable
    model_scale: float = 0.1
    diagnostic: str = ""

    @property
    def n_nodes(self) -> int:
        return len(self.node_time)

    @property
    def n_arcs(self) -> int:
        return len(self.src)

    @property
    def empty(self) -> bool:
        return not self.final

    @cached_property
    def arc_groups(self) -> list[np.ndarray]:
        """Arc indices grouped by source-node key, in key order; arcs in one
        group never feed each other."""
        order = np.argsort(self.node_key[self.src], kind="stable")
        keys = self.node_key[self.src][order]
        return [g for g in np.split(order, np.flatnonzero(np.diff(keys)) + 1) if len(g)]

    def to_fst(self, lm_scale: float | None = None) -> Fst:
        """Lattice as an Fst over transition-ids and words, weight model + s*LM."""
        s = 1.0 / self.model_scale if lm_scale is None else lm_scale
        fst = Fst(self.n_nodes, self.start)
        for a in range(self.n_arcs):
            fst.arcs.append((int(self.src[a]), int(self.dst[a]), int(self.tid[a]), int(self.word[a]),
                             float(self.model[a] + s * self.lm[a])))
        fst.finals = {n: s * w for n, w in self.final.items()}
        return fst

    def to_text(self) -> str:
        """Header, ``node id time state key`` lines, arc lines
        ``src dst tid word model lm`` and final lines ``node lm``."""
        lines = [f"# frames {self.n_frames} start {self.start} model_scale {float(self.model_scale)!r}"]
        lines += [f"node {i} {self.node_time[i]} {self.node_state[i]} {self.node_key[i]}"
                  for i in range(self.n_nodes)]
        for a in range(self.n_arcs):
            lines.append(f"{self.src[a]} {self.dst[a]} {self.tid[a]} {self.word[a]} "
                         f"{float(self.model[a])!r} {float(self.lm[a])!r}")
        lines += [f"{n} {float(w)!r}" for n, w in sorted(self.final.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, words: SymbolTable) -> "Lattice":
        head, *rows = text.splitlines()
        h = head.lstrip("#").split()
        meta = dict(zip(h[::2], h[1::2]))
        nodes, arcs, final = [], [], {}
        for ln in rows:
            r = ln.split()
            if not r:
                continue
            if r[0] == "node":
                nodes.append([int(x) for x in r[2:]])
            elif len(r) == 6:
                arcs.append([int(x) for x in r[:4]] + [float(r[4]), float(r[5])])
            elif len(r) == 2:
                final[int(r[0])] = float(r[1])
            else:
                raise DecodeError(f"malformed lattice line: {ln}")
        nd = np.array(nodes, dtype=np.int64).reshape(-1, 3)
        a = np.array(arcs, dtype=np.float64).reshape(-1, 6)
        ai = a[:, :4].astype(np.int64)
        return cls(int(meta["frames"]), nd[:, 0], nd[:, 1], nd[:, 2], ai[:, 0], ai[:, 1], a[:, 4], a[:, 5],
                   ai[:, 3], ai[:, 2], final, int(meta["start"]), words, float(meta["model_scale"]))

    @classmethod
    def from_arcs(cls, arcs: Sequence[tuple], final: dict[int, float], words: SymbolTable,
                  n_frames: int | None = None, start: int = 0, model_scale: float = 0.1) -> "Lattice":
        """Build from ``(src, dst, tid, word, model, lm)`` with nodes numbered
        topologically (every arc has ``src < dst``)."""
        a = np.array(arcs, dtype=object).reshape(-1, 6) if arcs else np.zeros((0, 6), dtype=object)
        src = a[:, 0].astype(np.int64)
        dst = a[:, 1].astype(np.int64)
        if np.any(src >= dst):
            raise DecodeError("lattice arcs must go from lower to higher node ids")
        n = int(max([start] + list(src) + list(dst) + list(final))) + 1
        tid = a[:, 2].astype(np.int64)
        t = np.zeros(n, dtype=np.int64)
        for s_, d_, e in sorted(zip(src, dst, tid)):
            t[d_] = max(t[d_], t[s_] + (1 if e > 0 else 0))
        return cls(int(n_frames if n_frames is not None else t.max(initial=0)), t, np.arange(n),
                   np.arange(n), src, dst, a[:, 4].astype(float), a[:, 5].astype(float),
                   a[:, 3].astype(np.int64), tid, dict(final), start, words, model_scale)


@dataclass
class BestPath:
    words: list[str]
    word_ids: tuple[int, ...]
    tids: np.ndarray
    model_cost: float
    lm_cost: float
    cost: float


def _eps_levels(n_states, src, dst):
    """Longest-path depth of each state in the epsilon subgraph."""
    level = np.zeros(n_states, dtype=np.int64)
    indeg = np.bincount(dst, minlength=n_states)
    out: dict[int, list[int]] = {}
    for s, d in zip(src.tolist(), dst.tolist()):
        out.setdefault(s, []).append(d)
    queue = [s for s in range(n_states) if indeg[s] == 0]
    seen = 0
    while queue:
        s = queue.pop()
        seen += 1
        for d in out.get(s, ()):
            level[d] = max(level[d], level[s] + 1)
            indeg[d] -= 1
            if indeg[d] == 0:
                queue.append(d)
    if seen != n_states:
        raise DecodeError("decoding graph has an epsilon cycle")
    return level


class Decoder:
    """Token passing over a decoding graph (precomputed arc arrays)."""

    def __init__(self, graph: DecodingGraph):
        self.graph = graph
        fst = graph.fst
        fst.check()
        src, dst, il, ol, w = fst.arrays()
        self.n_states = fst.n_states
        self.start = fst.start
        emit = il > 0
        order = np.argsort(src[emit], kind="stable")
        e = np.flatnonzero(emit)[order]
        self.e_src, self.e_dst, self.e_tid, self.e_w = src[e], dst[e], il[e], w[e]
        self.e_pdf = graph.trans.pdf[self.e_tid]
        self.e_tcost = graph.trans.cost[self.e_tid]
        self.e_ptr = np.concatenate([[0], np.cumsum(np.bincount(self.e_src, minlength=self.n_states))])
        eps = np.flatnonzero(~emit)
        self.level = _eps_levels(self.n_states, src[eps], dst[eps])
        self.eps_groups = []
        for lv in range(int(self.level.max(initial=0)) + 1):
            idx = eps[self.level[src[eps]] == lv]
            if len(idx):
                self.eps_groups.append((src[idx], dst[idx], ol[idx], w[idx]))
        self.finals = np.full(self.n_states, INF)
        for s, fw in fst.finals.items():
            self.finals[s] = fw

    def _closure(self, cur, t, rec):
        for s, d, o, w in self.eps_groups:
            c = cur[s] + w
            ok = np.isfinite(c)
            if not ok.any():
                continue
            s, d, o, w, c = s[ok], d[ok], o[ok], w[ok], c[ok]
            np.minimum.at(cur, d, c)
            rec.append((t, t, s, d, np.zeros(len(s), dtype=np.int64), o, np.zeros(len(s)), w, c))

    def decode(self, loglik: np.ndarray, beam: float = 13.0, lattice_beam: float = 8.0,
               model_scale: float = 0.1, prune_interval: int = 25, max_active: int | None = None) -> Lattice:
        loglik = np.asarray(loglik, dtype=np.float64)
        T = len(loglik)
        if loglik.ndim != 2 or loglik.shape[1] < self.graph.n_pdfs:
            raise DecodeError(f"scorer gives {loglik.shape[-1]} pdfs, graph needs {self.graph.n_pdfs}")
        cur = np.full(self.n_states, INF)
        cur[self.start] = 0.0
        rec: list[tuple] = []
        self._closure(cur, 0, rec)
        alphas = [cur.copy()]
        pruned = False
        for t in range(T):
            active = np.flatnonzero(np.isfinite(cur))
            lo, hi = self.e_ptr[active], self.e_ptr[active + 1]
            cnt = hi - lo
            idx = np.repeat(lo - np.concatenate([[0], np.cumsum(cnt)[:-1]]), cnt) + np.arange(cnt.sum())
            raw = self.e_tcost[idx] - loglik[t, self.e_pdf[idx]]
            cand = cur[self.e_src[idx]] + self.e_w[idx] + model_scale * raw
            if len(cand) and np.isfinite(beam):
                keep = cand <= cand.min() + beam
                pruned = pruned or not keep.all()
                idx, raw, cand = idx[keep], raw[keep], cand[keep]
            new = np.full(self.n_states, INF)
            np.minimum.at(new, self.e_dst[idx], cand)
            step = [(t, t + 1, self.e_src[idx], self.e_dst[idx], self.e_tid[idx],
                     np.zeros(len(idx), dtype=np.int64), raw, self.e_w[idx], cand)]
            self._closure(new, t + 1, step)
            if not np.isfinite(new).any():
                return self._empty(T, model_scale, f"all tokens pruned at frame {t}")
            best = new.min()
            if np.isfinite(beam):
                out = np.isfinite(new) & (new > best + beam)
                pruned = pruned or bool(out.any())
                new[out] = INF
            if max_active and (t + 1) % prune_interval == 0:
                live = np.flatnonzero(np.isfinite(new))
                if len(live) > max_active:
                    cut = np.partition(new[live], max_active - 1)[max_active - 1]
                    new[new > cut] = INF
                    pruned = True
            for r in step:
                ok = np.isfinite(new[r[3]]) & (r[8] <= best + beam)
                rec.append(tuple(x[ok] if isinstance(x, np.ndarray) else x for x in r))
            cur = new
            alphas.append(cur.copy())
        finals, diag = self.finals, ""
        if not np.isfinite(cur + finals).any():
            if not pruned:
                return self._empty(T, model_scale, "no complete path for this many frames")
            # pruning removed every complete path: keep the best partial ones
            finals = np.where(np.isfinite(cur), 0.0, INF)
            diag = "no token reached a final state; surviving tokens treated as final"
        lat = self._lattice(rec, alphas, T, lattice_beam, model_scale, finals)
        lat.diagnostic = diag
        return lat

    def _empty(self, T, scale, msg) -> Lattice:
        z = np.zeros(0, dtype=np.int64)
        return Lattice(T, z, z, z, z, z, np.zeros(0), np.zeros(0), z, z, {}, 0, self.graph.words, scale, msg)

    def _lattice(self, rec, alphas, T, lattice_beam, scale, finals) -> Lattice:
        # backward pass over recorded arcs (reverse topological order)
        betas = [np.full(self.n_states, INF) for _ in range(T + 1)]
        betas[T] = finals.copy()
        for (ts, td, s, d, _, _, raw, w, _) in reversed(rec):
            if len(s):
                np.minimum.at(betas[ts], s, scale * raw + w + betas[td][d])
        best = float(np.min(alphas[T] + finals))
        keep_arcs = []
        for (ts, td, s, d, tid, o, raw, w, _) in rec:
            if not len(s):
                continue
            tot = alphas[ts][s] + scale * raw + w + betas[td][d]
            ok = tot <= best + lattice_beam + 1e-9 * (1 + abs(best))
            if ok.any():
                keep_arcs.append((np.full(ok.sum(), ts), s[ok], np.full(ok.sum(), td), d[ok],
                                  tid[ok], o[ok], raw[ok], w[ok]))
        cols = [np.concatenate(c) for c in zip(*keep_arcs)]
        ts, s, td, d, tid, o, raw, w = cols
        L = int(self.level.max(initial=0)) + 1
        key_s = ts * self.n_states + s
        key_d = td * self.n_states + d
        fin_states = np.flatnonzero(np.isfinite(finals) & np.isfinite(alphas[T]) & np.isfinite(betas[T]))
        nodes = np.unique(np.concatenate([key_s, key_d, [self.start], T * self.n_states + fin_states]))
        nt, ns = nodes // self.n_states, nodes % self.n_states
        order_key = nt * L + self.level[ns]
        perm = np.lexsort((nodes, order_key))
        nodes, nt, ns, order_key = nodes[perm], nt[perm], ns[perm], order_key[perm]
        pos = {int(k): i for i, k in enumerate(nodes.tolist())}
        src = np.array([pos[k] for k in key_s.tolist()], dtype=np.int64)
        dst = np.array([pos[k] for k in key_d.tolist()], dtype=np.int64)
        final = {pos[int(T * self.n_states + f)]: float(finals[f]) for f in fin_states
                 if int(T * self.n_states + f) in pos
                 and alphas[T][f] + finals[f] <= best + lattice_beam + 1e-9 * (1 + abs(best))}
        return Lattice(T, nt, ns, order_key, src, dst, raw, w, o, tid, final, pos[self.start],
                       self.graph.words, scale)


def decode(graph: DecodingGraph, scorer, features, beam: float = 13.0, lattice_beam: float = 8.0,
           model_scale: float = 0.1, prune_interval: int = 25, max_active: int | None = 7000,
           decoder: Decoder | None = None) -> Lattice:
    """Decode one utterance. ``scorer(features)`` returns (T, n_pdfs)
    unscaled log-likelihoods (or log posterior minus log prior)."""
    dec = decoder or Decoder(graph)
    return dec.decode(scorer(features), beam, lattice_beam, model_scale, prune_interval, max_active)


def _tol(x):
    return 1e-9 * (1.0 + abs(x))


def best_path(lattice: Lattice, lm_scale: float | None = None) -> BestPath:
    """Minimum of model + lm_scale * LM over lattice paths; ties go to the
    lexicographically smaller word-id sequence."""
    if lattice.empty:
        raise DecodeError(f"empty lattice{': ' + lattice.diagnostic if lattice.diagnostic else ''}")
    s = 1.0 / lattice.model_scale if lm_scale is None else float(lm_scale)
    res = _best_fast(lattice, s)
    if res is None:
        res = _best_exact(lattice, s)
    return res


def _best_fast(lat: Lattice, s: float):
    """Vectorised DP; returns None when a near-tie makes the choice ambiguous."""
    dist = np.full(lat.n_nodes, INF)
    dist[lat.start] = 0.0
    w = lat.model + s * lat.lm
    for grp in lat.arc_groups:
        np.minimum.at(dist, lat.dst[grp], dist[lat.src[grp]] + w[grp])
    cand = dist[lat.src] + w
    hit = np.isfinite(cand) & (np.abs(cand - dist[lat.dst]) <= _tol(dist[lat.dst]))
    if np.any(np.bincount(lat.dst[hit], minlength=lat.n_nodes) > 1):
        return None
    back = np.full(lat.n_nodes, -1, dtype=np.int64)
    back[lat.dst[hit]] = np.flatnonzero(hit)
    tot = sorted((dist[nn] + s * fw, nn) for nn, fw in lat.final.items())
    if not np.isfinite(tot[0][0]):
        raise DecodeError("no complete path in lattice")
    if len(tot) > 1 and abs(tot[1][0] - tot[0][0]) <= _tol(tot[0][0]):
        return None
    return _trace(lat, back, tot[0][1], s)


def _trace(lat, back, node, s):
    final_lm = lat.final[node]
    arcs = []
    while node != lat.start:
        a = back[node]
        arcs.append(a)
        node = lat.src[a]
    arcs = np.array(arcs[::-1], dtype=np.int64)
    return _path_from_arcs(lat, arcs, s, final_lm)


def _path_from_arcs(lat, arcs, s, final_lm):
    wid = tuple(int(x) for x in lat.word[arcs] if x != EPS) if len(arcs) else ()
    model = float(lat.model[arcs].sum()) if len(arcs) else 0.0
    lm = float(lat.lm[arcs].sum()) + final_lm if len(arcs) else final_lm
    tids = lat.tid[arcs][lat.tid[arcs] > 0] if len(arcs) else np.zeros(0, dtype=np.int64)
    return BestPath([lat.words.symbol(i) for i in wid], wid, tids, model, lm, model + s * lm)


def _best_exact(lat: Lattice, s: float) -> BestPath:
    """Slow path with explicit word-sequence tie-breaking."""
    n = lat.n_nodes
    dist = [INF] * n
    seq: list[tuple] = [()] * n
    back = [-1] * n
    dist[lat.start] = 0.0
    w = lat.model + s * lat.lm
    order = np.lexsort((lat.dst, lat.node_key[lat.src]))
    for a in order.tolist():
        u, v = int(lat.src[a]), int(lat.dst[a])
        if not math.isfinite(dist[u]):
            continue
        c = dist[u] + w[a]
        ws = seq[u] + ((int(lat.word[a]),) if lat.word[a] != EPS else ())
        if c < dist[v] - _tol(c) or (abs(c - dist[v]) <= _tol(c) and ws < seq[v]):
            dist[v], seq[v], back[v] = c, ws, a
    best = None
    for nn, fw in sorted(lat.final.items()):
        c = dist[nn] + s * fw
        if best is None or c < best[0] - _tol(c) or (abs(c - best[0]) <= _tol(c) and seq[nn] < seq[best[1]]):
            best = (c, nn)
    if best is None or not math.isfinite(best[0]):
        raise DecodeError("no complete path in lattice")
    return _trace(lat, np.array(back, dtype=np.int64), best[1], s)


def rescore(lattice: Lattice, lm_scales: Iterable[float] = range(5, 16)) -> dict[float, BestPath]:
    """Best path for each LM scale (model cost + scale * LM cost)."""
    if lattice.empty:
        raise DecodeError("empty lattice")
    return {sc: best_path(lattice, sc) for sc in lm_scales}


def path_alignment(graph: DecodingGraph, tids: np.ndarray) -> Alignment:
    tr = graph.trans
    tids = np.asarray(tids, dtype=np.int64)
    return Alignment(tr.unit[tids], tr.state[tids], tr.pdf[tids], tr.left[tids], tr.right[tids],
                     ~tr.is_loop[tids])
