"""Phonetic-context decision trees for state tying.

Contexts are word-internal: a unit at a word edge sees the boundary
symbol ``BOUNDARY`` (-1) instead of its cross-word neighbour.
"""

from __future__ import annotations

import heapq
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .gmm import LOG_2PI

BOUNDARY = -1
LEFT, RIGHT = 0, 1


@dataclass
class TiedStateMap:
    """One binary tree per (unit, state-position) root.

    ``nodes`` holds ``("leaf", pdf)`` or ``("split", side, members, yes, no)``
    records; ``members`` is a sorted tuple of context ids.
    """

    n_units: int
    n_states: int
    roots: dict[tuple[int, int], int]
    nodes: list[tuple] = field(default_factory=list)

    @classmethod
    def context_independent(cls, n_units, n_states=3):
        roots, nodes = {}, []
        for u in range(n_units):
            for s in range(n_states):
                roots[(u, s)] = len(nodes)
                nodes.append(("leaf", u * n_states + s))
        return cls(n_units, n_states, roots, nodes)

    @property
    def n_pdfs(self) -> int:
        return 1 + max(n[1] for n in self.nodes if n[0] == "leaf")

    @property
    def n_leaves(self) -> int:
        return sum(1 for n in self.nodes if n[0] == "leaf")

    def resolve(self, unit: int, state: int, left: int = BOUNDARY, right: int = BOUNDARY) -> int:
        node = self.nodes[self.roots[(unit, state)]]
        while node[0] == "split":
            _, side, members, yes, no = node
            ctx = left if side == LEFT else right
            node = self.nodes[yes if ctx in members else no]
        return node[1]

    def pdf_units(self) -> dict[int, set[int]]:
        """Units whose states can resolve to each pdf."""
        out: dict[int, set[int]] = defaultdict(set)
        for (u, _), root in self.roots.items():
            stack = [root]
            while stack:
                n = self.nodes[stack.pop()]
                if n[0] == "leaf":
                    out[n[1]].add(u)
                else:
                    stack += [n[3], n[4]]
        return dict(out)

    def to_records(self) -> dict:
        return {
            "n_units": self.n_units,
            "n_states": self.n_states,
            "roots": [[u, s, i] for (u, s), i in sorted(self.roots.items())],
            "nodes": [list(n[:2]) if n[0] == "leaf" else [n[0], n[1], list(n[2]), n[3], n[4]]
                      for n in self.nodes],
        }

    @classmethod
    def from_records(cls, rec: dict) -> "TiedStateMap":
        nodes = []
        for n in rec["nodes"]:
            if n[0] == "leaf":
                nodes.append(("leaf", int(n[1])))
            else:
                nodes.append(("split", int(n[1]), tuple(int(x) for x in n[2]), int(n[3]), int(n[4])))
        roots = {(int(u), int(s)): int(i) for u, s, i in rec["roots"]}
        return cls(int(rec["n_units"]), int(rec["n_states"]), roots, nodes)


class ContextStats:
    """Per (unit, state, left, right) frame count, sum and sum of squares."""

    def __init__(self, dim):
        self.dim = dim
        self.data: dict[tuple[int, int, int, int], np.ndarray] = {}

    def accumulate(self, alignment, X):
        keys = np.stack([alignment.unit, alignment.state, alignment.left, alignment.right], 1)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.ravel()
        n = np.bincount(inv, minlength=len(uniq)).astype(float)
        s = np.zeros((len(uniq), self.dim))
        ss = np.zeros((len(uniq), self.dim))
        np.add.at(s, inv, X)
        np.add.at(ss, inv, X * X)
        for i, k in enumerate(map(tuple, uniq.tolist())):
            rec = np.concatenate([[n[i]], s[i], ss[i]])
            if k in self.data:
                self.data[k] += rec
            else:
                self.data[k] = rec
        return self

    def by_root(self):
        out = defaultdict(list)
        for k, v in self.data.items():
            out[k[:2]].append((k, v))
        return out


def _gauss_ll(stats: np.ndarray, dim: int, var_floor) -> np.ndarray:
    """Single diagonal Gaussian ML log-likelihood of pooled stats (rows)."""
    stats = np.atleast_2d(stats)
    n = stats[:, 0]
    s = stats[:, 1:dim + 1]
    ss = stats[:, dim + 1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu = s / n[:, None]
        v = np.maximum(ss / n[:, None] - mu ** 2, var_floor)
        quad = ((ss - s * mu) / v).sum(1)
        ll = -0.5 * (n * dim * LOG_2PI + n * np.log(v).sum(1) + quad)
    return np.where(n > 0, ll, 0.0)


def cluster_units(unit_means: dict[int, np.ndarray], unit_occ: dict[int, float]) -> list[frozenset]:
    """Occupancy-weighted agglomerative (Ward) clustering of units.

    Every cluster formed along the way becomes a candidate question set.
    """
    clusters = {frozenset([u]): (unit_occ[u], unit_means[u]) for u in unit_means}
    sets = list(clusters)
    while len(clusters) > 1:
        keys = sorted(clusters, key=lambda c: sorted(c))
        best = None
        for i in range(len(keys)):
            na, ma = clusters[keys[i]]
            for j in range(i + 1, len(keys)):
                nb, mb = clusters[keys[j]]
                cost = na * nb / max(na + nb, 1e-12) * float(((ma - mb) ** 2).sum())
                if best is None or cost < best[0]:
                    best = (cost, keys[i], keys[j])
        _, a, b = best
        na, ma = clusters.pop(a)
        nb, mb = clusters.pop(b)
        tot = na + nb
        merged = (tot, (na * ma + nb * mb) / tot if tot > 0 else (ma + mb) / 2)
        clusters[a | b] = merged
        sets.append(a | b)
    return sets


def build_tree(stats: ContextStats, n_units: int, max_leaves: int = 2000, *,
               n_states: int = 3, var_floor=0.0, no_split_units=(), min_gain: float | None = None,
               min_count: float = 10.0, penalty: float = 0.5) -> TiedStateMap:
    """Greedy top-down likelihood-gain splitting of every (unit, state) root.

    Questions ask whether the left or right neighbour lies in a unit cluster
    (from ``cluster_units``) or is the word boundary. Splitting stops at
    ``max_leaves`` total leaves or when the best gain drops below
    ``min_gain`` (default ``penalty * dim * log(n)`` for an n-frame node).
    Roots never seen in training stay single leaves.
    """
    dim = stats.dim
    roots_data = stats.by_root()
    # question sets from CI means
    unit_acc: dict[int, list] = defaultdict(list)
    for (u, s), items in roots_data.items():
        tot = sum(v for _, v in items)
        unit_acc[u].append((s, tot))
    means, occ = {}, {}
    for u, lst in unit_acc.items():
        if u in no_split_units:
            continue
        vec = np.zeros(n_states * dim)
        n = 0.0
        for s, tot in lst:
            if tot[0] > 0:
                vec[s * dim:(s + 1) * dim] = tot[1:dim + 1] / tot[0]
            n += tot[0]
        means[u], occ[u] = vec, n
    questions = [frozenset([BOUNDARY])]
    if means:
        questions += [q for q in cluster_units(means, occ) if len(q) < len(means)]
    questions = list(dict.fromkeys(questions))
    qsets = [tuple(sorted(q)) for q in questions]

    nodes: list[tuple] = []
    roots: dict[tuple[int, int], int] = {}
    heap: list = []
    leaf_items: dict[int, list] = {}
    counter = 0

    def best_split(items):
        if len(items) < 2:
            return None
        keys = [k for k, _ in items]
        mat = np.array([v for _, v in items])
        total = mat.sum(0)
        if total[0] < 2 * min_count:
            return None
        base = _gauss_ll(total, dim, var_floor)[0]
        thresh = min_gain if min_gain is not None else penalty * dim * np.log(max(total[0], 2.0))
        best = None
        for side in (LEFT, RIGHT):
            ctx = np.array([k[2 + side] for k in keys])
            member = np.array([[c in q for c in ctx] for q in questions], dtype=float)
            yes = member @ mat
            no = total - yes
            valid = (yes[:, 0] >= min_count) & (no[:, 0] >= min_count)
            if not valid.any():
                continue
            gain = _gauss_ll(yes, dim, var_floor) + _gauss_ll(no, dim, var_floor) - base
            gain[~valid] = -np.inf
            qi = int(np.argmax(gain))
            if best is None or gain[qi] > best[0]:
                best = (float(gain[qi]), side, qi)
        if best is None or best[0] < thresh:
            return None
        return best

    for u in range(n_units):
        for s in range(n_states):
            idx = len(nodes)
            roots[(u, s)] = idx
            nodes.append(("leaf", -1))
            items = roots_data.get((u, s), [])
            leaf_items[idx] = items
            if u in no_split_units:
                continue
            b = best_split(items)
            if b is not None:
                heapq.heappush(heap, (-b[0], counter, idx, b))
                counter += 1

    n_leaves = len(roots)
    while heap and n_leaves < max_leaves:
        _, _, idx, (gain, side, qi) = heapq.heappop(heap)
        items = leaf_items.pop(idx)
        q = questions[qi]
        yes_items = [it for it in items if it[0][2 + side] in q]
        no_items = [it for it in items if it[0][2 + side] not in q]
        yi, ni = len(nodes), len(nodes) + 1
        nodes.append(("leaf", -1))
        nodes.append(("leaf", -1))
        nodes[idx] = ("split", side, qsets[qi], yi, ni)
        leaf_items[yi], leaf_items[ni] = yes_items, no_items
        n_leaves += 1
        for child, its in ((yi, yes_items), (ni, no_items)):
            b = best_split(its)
            if b is not None:
                heapq.heappush(heap, (-b[0], counter, child, b))
                counter += 1

    # number leaves in root order, depth first
    pdf = 0
    for key in sorted(roots):
        stack = [roots[key]]
        while stack:
            i = stack.pop()
            n = nodes[i]
            if n[0] == "leaf":
                nodes[i] = ("leaf", pdf)
                pdf += 1
            else:
                stack += [n[4], n[3]]
    return TiedStateMap(n_units, n_states, roots, nodes)


def leaf_stats(tree: TiedStateMap, stats: ContextStats) -> np.ndarray:
    """Pooled (n, sum, sumsq) per pdf of ``tree``."""
    out = np.zeros((tree.n_pdfs, 1 + 2 * stats.dim))
    for (u, s, l, r), v in stats.data.items():
        out[tree.resolve(u, s, l, r)] += v
    return out
