"""Stacked diagonal-covariance Gaussian mixtures, one mixture per pdf-id."""

from __future__ import annotations

import numpy as np
from scipy import sparse

LOG_2PI = float(np.log(2 * np.pi))


class GmmError(ValueError):
    pass


class DiagGmmSet:
    """All mixtures of an acoustic model in flat arrays.

    Components are stored sorted by pdf; ``starts[p]:starts[p+1]`` are the
    components of pdf ``p``.
    """

    def __init__(self, weights, means, variances, pdf_of, n_pdfs=None):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.vars = np.atleast_2d(np.asarray(variances, dtype=np.float64))
        self.pdf_of = np.asarray(pdf_of, dtype=np.int64)
        order = np.argsort(self.pdf_of, kind="stable")
        if np.any(order != np.arange(len(order))):
            self.weights, self.means, self.vars, self.pdf_of = (
                self.weights[order], self.means[order], self.vars[order], self.pdf_of[order])
        self.n_pdfs = int(n_pdfs if n_pdfs is not None else self.pdf_of.max() + 1)
        counts = np.bincount(self.pdf_of, minlength=self.n_pdfs)
        if np.any(counts == 0):
            raise GmmError(f"pdfs without components: {np.flatnonzero(counts == 0)[:10]}")
        self.starts = np.concatenate([[0], np.cumsum(counts)])
        self._refresh()

    @classmethod
    def single(cls, means, variances):
        means = np.atleast_2d(means)
        return cls(np.ones(len(means)), means, variances, np.arange(len(means)))

    def _refresh(self):
        if np.any(self.vars <= 0):
            raise GmmError("non-positive variance")
        self.inv_vars = 1.0 / self.vars
        self.mean_invvar = self.means * self.inv_vars
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        self.gconst = logw - 0.5 * (
            self.dim * LOG_2PI + np.log(self.vars).sum(1) + (self.means * self.mean_invvar).sum(1))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def counts(self) -> np.ndarray:
        return np.diff(self.starts)

    def copy(self) -> "DiagGmmSet":
        return DiagGmmSet(self.weights.copy(), self.means.copy(), self.vars.copy(),
                          self.pdf_of.copy(), self.n_pdfs)

    def _check(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise GmmError(f"dimension mismatch: {X.shape[1]} != {self.dim}")
        return X

    def component_loglik(self, X) -> np.ndarray:
        X = self._check(X)
        return self.gconst + X @ self.mean_invvar.T - 0.5 * (X * X) @ self.inv_vars.T

    def loglik(self, X) -> np.ndarray:
        """(T, n_pdfs) log-likelihood of every frame under every pdf."""
        ll = self.component_loglik(X)
        mx = np.maximum.reduceat(ll, self.starts[:-1], axis=1)
        rep = np.repeat(mx, self.counts(), axis=1)
        with np.errstate(invalid="ignore"):
            s = np.add.reduceat(np.exp(ll - rep), self.starts[:-1], axis=1)
        return mx + np.log(s)

    def loglik_subset(self, X, pdfs) -> np.ndarray:
        """(T, len(pdfs)) log-likelihoods restricted to ``pdfs``."""
        X = self._check(X)
        pdfs = np.asarray(pdfs, dtype=np.int64)
        cnt = self.counts()[pdfs]
        first = np.concatenate([[0], np.cumsum(cnt)[:-1]])
        comps = np.repeat(self.starts[pdfs], cnt) + np.arange(cnt.sum()) - np.repeat(first, cnt)
        ll = self.gconst[comps] + X @ self.mean_invvar[comps].T - 0.5 * (X * X) @ self.inv_vars[comps].T
        mx = np.maximum.reduceat(ll, first, axis=1)
        with np.errstate(invalid="ignore"):
            s = np.add.reduceat(np.exp(ll - np.repeat(mx, cnt, axis=1)), first, axis=1)
        return mx + np.log(s)

    def _pairs(self, pdf_ids):
        pdf_ids = np.asarray(pdf_ids, dtype=np.int64)
        cnt = self.counts()[pdf_ids]
        rows = np.repeat(np.arange(len(pdf_ids)), cnt)
        first = np.concatenate([[0], np.cumsum(cnt)[:-1]])
        comps = self.starts[pdf_ids][rows] + np.arange(len(rows)) - np.repeat(first, cnt)
        return rows, comps, first

    def posteriors(self, X, pdf_ids):
        """Component posteriors for frames with known pdf.

        Returns ``(rows, comps, gamma, frame_ll)`` where the triplets list
        every (frame, component-of-its-pdf) pair.
        """
        X = self._check(X)
        rows, comps, first = self._pairs(pdf_ids)
        Xr = X[rows]
        ll = self.gconst[comps] + np.einsum("nd,nd->n", Xr, self.mean_invvar[comps]) \
            - 0.5 * np.einsum("nd,nd->n", Xr * Xr, self.inv_vars[comps])
        if len(first) == 0:
            return rows, comps, ll, np.zeros(0)
        mx = np.maximum.reduceat(ll, first)
        e = np.exp(ll - mx[rows])
        s = np.add.reduceat(e, first)
        return rows, comps, e / s[rows], mx + np.log(s)

    def frame_loglik(self, X, pdf_ids) -> np.ndarray:
        return self.posteriors(X, pdf_ids)[3]


def gmm_state_loglike(model, pdf_id: int, frame) -> float:
    """log sum_i w_i N(frame; mu_i, diag var_i) for one pdf of ``model``."""
    gmms = getattr(model, "gmms", model)
    frame = np.asarray(frame, dtype=np.float64).reshape(1, -1)
    if frame.shape[1] != gmms.dim:
        raise GmmError(f"dimension mismatch: {frame.shape[1]} != {gmms.dim}")
    return float(gmms.frame_loglik(frame, [pdf_id])[0])


class GmmStats:
    """Zeroth, first and second order component statistics.

    Accumulators add, so per-utterance stats can be merged in any order.
    """

    def __init__(self, n_components, dim):
        self.occ = np.zeros(n_components)
        self.sum = np.zeros((n_components, dim))
        self.sumsq = np.zeros((n_components, dim))
        self.loglik = 0.0
        self.frames = 0

    def __iadd__(self, other):
        self.occ += other.occ
        self.sum += other.sum
        self.sumsq += other.sumsq
        self.loglik += other.loglik
        self.frames += other.frames
        return self

    def accumulate(self, gmms: DiagGmmSet, X, pdf_ids):
        X = np.atleast_2d(X)
        rows, comps, gamma, frame_ll = gmms.posteriors(X, pdf_ids)
        G = sparse.csr_matrix((gamma, (comps, rows)), shape=(len(self.occ), len(X)))
        self.occ += np.asarray(G.sum(axis=1)).ravel()
        self.sum += G @ X
        self.sumsq += G @ (X * X)
        self.loglik += float(frame_ll.sum())
        self.frames += len(X)
        return self


def update_gmms(gmms: DiagGmmSet, stats: GmmStats, var_floor, min_occ: float = 1e-6) -> DiagGmmSet:
    """Maximum-likelihood update; components with negligible occupancy keep
    their parameters so the update never lowers the auxiliary function."""
    occ = stats.occ
    starts = gmms.starts
    pdf_occ = np.add.reduceat(occ, starts[:-1])
    weights = gmms.weights.copy()
    means = gmms.means.copy()
    variances = gmms.vars.copy()
    seen = pdf_occ[gmms.pdf_of] > 0
    weights[seen] = occ[seen] / pdf_occ[gmms.pdf_of][seen]
    ok = occ > min_occ
    means[ok] = stats.sum[ok] / occ[ok, None]
    v = stats.sumsq[ok] / occ[ok, None] - means[ok] ** 2
    variances[ok] = np.maximum(v, var_floor)
    return DiagGmmSet(weights, means, variances, gmms.pdf_of, gmms.n_pdfs)


def split_components(gmms: DiagGmmSet, targets, perturb: float = 0.1) -> DiagGmmSet:
    """Grow each pdf to ``targets[p]`` components by repeatedly splitting
    its heaviest component into two half-weight copies at mean +/- perturb*sigma."""
    W, M, V, P = [], [], [], []
    for p in range(gmms.n_pdfs):
        sl = slice(gmms.starts[p], gmms.starts[p + 1])
        w = list(gmms.weights[sl])
        m = list(gmms.means[sl])
        v = list(gmms.vars[sl])
        while len(w) < targets[p]:
            i = int(np.argmax(w))
            sd = np.sqrt(v[i])
            w[i] /= 2
            w.append(w[i])
            m.append(m[i] - perturb * sd)
            m[i] = m[i] + perturb * sd
            v.append(v[i].copy())
        W += w
        M += m
        V += v
        P += [p] * len(w)
    return DiagGmmSet(W, np.array(M), np.array(V), P, gmms.n_pdfs)


def prune_components(gmms: DiagGmmSet, min_weight: float = 1e-5) -> DiagGmmSet:
    """Drop near-zero-weight components (the heaviest of each pdf is kept)."""
    keep = gmms.weights >= min_weight
    for p in range(gmms.n_pdfs):
        sl = slice(gmms.starts[p], gmms.starts[p + 1])
        if not keep[sl].any():
            keep[gmms.starts[p] + int(np.argmax(gmms.weights[sl]))] = True
    if keep.all():
        return gmms
    w = gmms.weights[keep]
    pdf = gmms.pdf_of[keep]
    tot = np.bincount(pdf, weights=w, minlength=gmms.n_pdfs)
    return DiagGmmSet(w / tot[pdf], gmms.means[keep], gmms.vars[keep], pdf, gmms.n_pdfs)


def allocate_gaussians(occ, budget: int, power: float = 0.2, min_occ_per_gauss: float = 20.0,
                       current=None) -> np.ndarray:
    """Distribute ``budget`` Gaussians over pdfs in proportion to occ**power.

    Every pdf gets at least one (and never fewer than it has now); no pdf
    gets more than ``occ / min_occ_per_gauss``.
    """
    occ = np.asarray(occ, dtype=np.float64)
    current = np.ones(len(occ), dtype=int) if current is None else np.asarray(current)
    cap = np.maximum(np.floor(occ / min_occ_per_gauss), 1).astype(int)
    share = occ ** power
    if share.sum() <= 0:
        return np.maximum(current, 1)
    target = np.maximum(np.round(budget * share / share.sum()).astype(int), 1)
    target = np.minimum(target, cap)
    return np.maximum(target, current)
