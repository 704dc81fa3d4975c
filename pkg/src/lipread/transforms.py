"""Feature pre-processing: speaker mean normalisation, deltas, splicing,
LDA, MLLT (semi-tied covariance) and per-speaker fMLLR."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg, sparse
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import archive


class TransformError(ValueError):
    pass


class PipelineOrderError(TransformError):
    pass


# Rank of each pipeline stage; a stage may only be applied to features of a
# strictly lower rank. "deltas" is a dead end (GMM stages 1-2 only).
STAGES = {"raw": 0, "meannorm": 1, "deltas": 2, "splice": 2, "lda": 3, "mllt": 4,
          "fmllr": 5, "cmvn": 6, "context": 7}


class FeatureMap(dict):
    """utterance-id -> T x D matrix, tagged with its pipeline stage."""

    def __init__(self, *args, stage: str = "raw", **kw):
        super().__init__(*args, **kw)
        if stage not in STAGES:
            raise TransformError(f"unknown stage {stage!r}")
        self.stage = stage

    @property
    def dim(self) -> int:
        return next(iter(self.values())).shape[1]


def _advance(feats: Mapping, stage: str) -> FeatureMap:
    current = getattr(feats, "stage", None)
    if current is not None and STAGES[current] >= STAGES[stage]:
        raise PipelineOrderError(f"cannot apply {stage!r} to features at stage {current!r}")
    return FeatureMap(stage=stage)


def speaker_mean_normalize(feats: Mapping[str, np.ndarray], utt2spk: Mapping[str, str]) -> FeatureMap:
    out = _advance(feats, "meannorm")
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for uid, x in feats.items():
        if uid not in utt2spk:
            raise TransformError(f"unknown speaker for utterance {uid!r}")
        s = utt2spk[uid]
        sums[s] = sums.get(s, 0) + x.sum(0)
        counts[s] = counts.get(s, 0) + len(x)
    for uid, x in feats.items():
        s = utt2spk[uid]
        out[uid] = x - sums[s] / counts[s]
    return out


def _deltas(x, window):
    T = len(x)
    idx = np.arange(T)
    num = np.zeros_like(x)
    for n in range(1, window + 1):
        num += n * (x[np.minimum(idx + n, T - 1)] - x[np.maximum(idx - n, 0)])
    return num / (2 * sum(n * n for n in range(1, window + 1)))


def add_deltas(x: np.ndarray, window: int = 2) -> np.ndarray:
    """Append regression deltas and delta-deltas (edge frames replicated)."""
    x = np.asarray(x, dtype=np.float64)
    d = _deltas(x, window)
    return np.hstack([x, d, _deltas(d, window)])


def splice(x: np.ndarray, left: int = 7, right: int = 7) -> np.ndarray:
    """Stack frames t-left..t+right onto frame t, replicating edge frames."""
    x = np.asarray(x, dtype=np.float64)
    T = len(x)
    idx = np.clip(np.arange(T)[:, None] + np.arange(-left, right + 1)[None, :], 0, T - 1)
    return x[idx].reshape(T, -1)


def map_deltas(feats, window: int = 2) -> FeatureMap:
    out = _advance(feats, "deltas")
    out.update({k: add_deltas(v, window) for k, v in feats.items()})
    return out


def map_splice(feats, left: int = 7, right: int = 7, stage: str = "splice") -> FeatureMap:
    out = _advance(feats, stage)
    out.update({k: splice(v, left, right) for k, v in feats.items()})
    return out


def cmvn(feats, mean=None, std=None) -> tuple[FeatureMap, np.ndarray, np.ndarray]:
    """Global mean and variance normalisation; pass training statistics to
    normalise held-out data identically."""
    out = _advance(feats, "cmvn")
    if mean is None:
        allx = np.concatenate(list(feats.values()))
        mean, std = allx.mean(0), np.maximum(allx.std(0), 1e-8)
    out.update({k: (v - mean) / std for k, v in feats.items()})
    return out, mean, std


@dataclass
class LinearTransform:
    """y = matrix @ x (+ bias)."""

    matrix: np.ndarray
    bias: np.ndarray | None = None
    trace: list = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
        if not np.all(np.isfinite(self.matrix)):
            raise TransformError("non-finite transform entries")

    @property
    def in_dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def out_dim(self) -> int:
        return self.matrix.shape[0]

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise TransformError(f"dimension mismatch: {x.shape[-1]} != {self.in_dim}")
        y = x @ self.matrix.T
        return y + self.bias if self.bias is not None else y

    def then(self, other: "LinearTransform") -> "LinearTransform":
        """The transform applying ``self`` first, then ``other``."""
        m = other.matrix @ self.matrix
        b = None
        if self.bias is not None or other.bias is not None:
            b = np.zeros(other.out_dim)
            if self.bias is not None:
                b = b + other.matrix @ self.bias
            if other.bias is not None:
                b = b + other.bias
        return LinearTransform(m, b)

    def as_affine(self) -> np.ndarray:
        b = self.bias if self.bias is not None else np.zeros(self.out_dim)
        return np.hstack([self.matrix, b[:, None]])

    @classmethod
    def from_affine(cls, w) -> "LinearTransform":
        w = np.asarray(w)
        return cls(w[:, :-1], w[:, -1])

    @classmethod
    def identity(cls, dim, affine: bool = False) -> "LinearTransform":
        return cls(np.eye(dim), np.zeros(dim) if affine else None)

    def save(self, path):
        recs = {"matrix": self.matrix}
        if self.bias is not None:
            recs["bias"] = self.bias
        archive.write_feature_archive(recs, path)

    @classmethod
    def load(cls, path) -> "LinearTransform":
        recs = archive.read_feature_archive(path)
        if "matrix" not in recs:
            raise archive.ArchiveError("malformed archive: no matrix record")
        return cls(recs["matrix"], recs["bias"][0] if "bias" in recs else None)


def save_speaker_transforms(transforms: Mapping[str, LinearTransform], path):
    archive.write_feature_archive({s: t.as_affine() for s, t in transforms.items()}, path)


def load_speaker_transforms(path) -> dict[str, LinearTransform]:
    return {s: LinearTransform.from_affine(w) for s, w in archive.read_feature_archive(path).items()}


def apply_transform(features, t: LinearTransform, stage: str | None = None):
    """Apply ``t`` to one matrix or to every matrix of a feature map."""
    if isinstance(features, Mapping):
        out = _advance(features, stage) if stage else FeatureMap(stage=getattr(features, "stage", "raw"))
        out.update({k: t(v) for k, v in features.items()})
        return out
    return t(features)


def apply_speaker_transforms(feats, transforms: Mapping[str, LinearTransform], utt2spk) -> FeatureMap:
    out = _advance(feats, "fmllr")
    for k, v in feats.items():
        t = transforms.get(utt2spk[k])
        out[k] = t(v) if t is not None else v
    return out


# -- LDA ----------------------------------------------------------------------

class LDA(TransformerMixin, BaseEstimator):
    """Linear discriminant analysis with within-class whitening.

    Rows of ``components_`` solve ``Sb v = l Sw v`` for the ``out_dim``
    largest ``l`` and satisfy ``V Sw V^T = I``.
    """

    def __init__(self, out_dim: int = 40, floor: float = 1e-6):
        self.out_dim = out_dim
        self.floor = floor

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        classes, inv = np.unique(y, return_inverse=True)
        if len(classes) < 2:
            raise TransformError("LDA needs at least two classes")
        n, d = X.shape
        if self.out_dim > d:
            raise TransformError(f"out_dim={self.out_dim} exceeds input dimension {d}")
        counts = np.bincount(inv).astype(float)
        G = sparse.csr_matrix((np.ones(n), (inv, np.arange(n))), shape=(len(classes), n))
        means = (G @ X) / counts[:, None]
        mu = X.mean(0)
        Xc = X - means[inv]
        Sw = Xc.T @ Xc / n
        Sw = Sw + self.floor * np.trace(Sw) / d * np.eye(d)
        Mc = (means - mu) * np.sqrt(counts[:, None] / n)
        Sb = Mc.T @ Mc
        vals, vecs = linalg.eigh(Sb, Sw)
        order = np.argsort(vals)[::-1][: self.out_dim]
        self.eigenvalues_ = vals[order]
        comps = vecs[:, order].T
        idx = np.argmax(np.abs(comps), axis=1)
        comps *= np.sign(comps[np.arange(len(comps)), idx])[:, None]
        self.components_ = comps
        self.mean_ = mu
        self.n_features_in_ = d
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X)
        return X @ self.components_.T

    def as_transform(self) -> LinearTransform:
        check_is_fitted(self, "components_")
        return LinearTransform(self.components_)


def lda_fit(features: Sequence[np.ndarray] | np.ndarray, labels, out_dim: int = 40) -> LinearTransform:
    """Fit LDA where classes are per-frame tied-state ids."""
    if isinstance(features, Mapping):
        raise TransformError("pass stacked frames and labels, not a feature map")
    X = np.concatenate(features) if isinstance(features, (list, tuple)) else np.asarray(features)
    y = np.concatenate(labels) if isinstance(labels, (list, tuple)) else np.asarray(labels)
    lda = LDA(out_dim).fit(X, y)
    t = lda.as_transform()
    t.trace = list(lda.eigenvalues_)
    return t


# -- MLLT ---------------------------------------------------------------------

def _posterior_matrix(model, X, pdf_ids):
    rows, comps, gamma, ll = model.gmms.posteriors(X, pdf_ids)
    return sparse.csr_matrix((gamma, (comps, rows)), shape=(model.gmms.n_components, len(X))), ll


def gaussian_full_stats(model, features: Sequence[np.ndarray], alignments: Sequence):
    """Per-component occupancy, mean and full covariance in the current space."""
    M, D = model.gmms.n_components, model.dim
    occ = np.zeros(M)
    s1 = np.zeros((M, D))
    s2 = np.zeros((M, D, D))
    for X, ali in zip(features, alignments):
        G, _ = _posterior_matrix(model, X, ali.pdf)
        G = G.tocsr()
        occ += np.asarray(G.sum(1)).ravel()
        s1 += G @ X
        for m in np.flatnonzero(np.diff(G.indptr)):
            lo, hi = G.indptr[m], G.indptr[m + 1]
            idx, g = G.indices[lo:hi], G.data[lo:hi]
            Xm = X[idx]
            s2[m] += (Xm * g[:, None]).T @ Xm
    keep = occ > 1e-10
    mean = np.zeros((M, D))
    mean[keep] = s1[keep] / occ[keep, None]
    cov = np.zeros((M, D, D))
    cov[keep] = s2[keep] / occ[keep, None, None] - np.einsum("mi,mj->mij", mean[keep], mean[keep])
    # sparse components can give indefinite estimates; the variance floor keeps them positive
    cov[keep] = 0.5 * (cov[keep] + cov[keep].transpose(0, 2, 1)) + np.diag(model.var_floor)
    return occ, mean, cov


def mllt_objective(A, occ, cov) -> float:
    """beta*log|det A| - 1/2 sum_m occ_m sum_i log(a_i cov_m a_i^T)."""
    _, logdet = np.linalg.slogdet(A)
    v = np.einsum("id,mde,ie->mi", A, cov, A)
    return float(occ.sum() * logdet - 0.5 * (occ[:, None] * np.log(v)).sum())


def mllt_estimate(occ, cov, n_iters: int = 10, A0=None, row_passes: int = 1):
    """Row-by-row semi-tied covariance estimation (objective never decreases)."""
    keep = occ > 1e-10
    occ, cov = occ[keep], cov[keep]
    D = cov.shape[1]
    A = np.eye(D) if A0 is None else np.array(A0, dtype=np.float64)
    beta = occ.sum()
    trace = [mllt_objective(A, occ, cov)]
    for _ in range(n_iters):
        for _ in range(row_passes):
            for i in range(D):
                var_i = np.einsum("d,mde,e->m", A[i], cov, A[i])
                G = np.einsum("m,mde->de", occ / var_i, cov)
                c = np.linalg.inv(A).T[i] * np.linalg.det(A)
                Gi_c = np.linalg.solve(G, c)
                A[i] = Gi_c * np.sqrt(beta / (c @ Gi_c))
        trace.append(mllt_objective(A, occ, cov))
    return A, trace


def mllt_fit(model, features: Sequence[np.ndarray], alignments: Sequence, n_iters: int = 10) -> LinearTransform:
    """Estimate a square feature transform for ``model``'s diagonal Gaussians
    and move the model into the new space in place.

    The per-iteration objective is kept in ``LinearTransform.trace``.
    """
    occ, mean, cov = gaussian_full_stats(model, features, alignments)
    A, trace = mllt_estimate(occ, cov, n_iters)
    gm = model.gmms
    new_means = gm.means @ A.T
    new_vars = gm.vars.copy()
    seen = occ > 1e-10
    new_vars[seen] = np.einsum("id,mde,ie->mi", A, cov[seen], A)
    allx = np.concatenate([x @ A.T for x in features])
    floor = 1e-4 * allx.var(0)
    from .gmmhmm.gmm import DiagGmmSet  # local: gmmhmm depends on this module
    model.gmms = DiagGmmSet(gm.weights, new_means, np.maximum(new_vars, floor), gm.pdf_of, gm.n_pdfs)
    model.var_floor = floor
    return LinearTransform(A, trace=trace)


class MLLT(TransformerMixin, BaseEstimator):
    """Semi-tied transform fitted on frames with known class labels, one
    full-covariance Gaussian per class."""

    def __init__(self, n_iters: int = 10):
        self.n_iters = n_iters

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        classes, inv = np.unique(y, return_inverse=True)
        occ = np.bincount(inv).astype(float)
        cov = np.stack([np.cov(X[inv == c].T, bias=True).reshape(X.shape[1], X.shape[1])
                        for c in range(len(classes))])
        self.components_, self.objective_ = mllt_estimate(occ, cov, self.n_iters)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        return check_array(X) @ self.components_.T


# -- fMLLR --------------------------------------------------------------------

@dataclass
class FmllrStats:
    beta: float
    K: np.ndarray          # D x (D+1)
    G: np.ndarray          # D x (D+1) x (D+1)
    loglik: float = 0.0    # of transformed frames, Jacobian included

    def __iadd__(self, o):
        self.beta += o.beta
        self.K += o.K
        self.G += o.G
        self.loglik += o.loglik
        return self


def fmllr_accumulate(model, X, ali, W: LinearTransform | None = None) -> FmllrStats:
    """Statistics of original frames ``X`` with Gaussian posteriors computed
    on the currently transformed frames."""
    D = X.shape[1]
    Y = W(X) if W is not None else X
    G, ll = _posterior_matrix(model, Y, ali.pdf)
    Gt = G.T.tocsr()
    c = Gt @ model.gmms.inv_vars          # T x D: sum_m g/var
    e = Gt @ model.gmms.mean_invvar       # T x D: sum_m g*mu/var
    xi = np.hstack([X, np.ones((len(X), 1))])
    Gs = np.stack([(xi * c[:, i:i + 1]).T @ xi for i in range(D)])
    K = e.T @ xi
    logdet = np.linalg.slogdet(W.matrix)[1] if W is not None else 0.0
    return FmllrStats(float(len(X)), K, Gs, float(ll.sum()) + len(X) * logdet)


def fmllr_auxf(W: np.ndarray, st: FmllrStats) -> float:
    A = W[:, :-1]
    _, logdet = np.linalg.slogdet(A)
    quad = np.einsum("ij,ijk,ik->", W, st.G, W)
    return float(st.beta * logdet + np.einsum("ij,ij->", W, st.K) - 0.5 * quad)


def fmllr_update(W: np.ndarray, st: FmllrStats, passes: int = 1) -> np.ndarray:
    """Row-wise maximisation of the fMLLR auxiliary function."""
    W = W.copy()
    D = W.shape[0]
    for _ in range(passes):
        for i in range(D):
            A = W[:, :-1]
            cof = np.linalg.inv(A).T[i] * np.linalg.det(A)
            ci = np.append(cof, 0.0)
            Ginv_c = np.linalg.solve(st.G[i], ci)
            Ginv_k = np.linalg.solve(st.G[i], st.K[i])
            e1 = ci @ Ginv_c
            e2 = ci @ Ginv_k
            disc = np.sqrt(e2 * e2 + 4 * e1 * st.beta)
            best, best_f = None, -np.inf
            for alpha in ((-e2 + disc) / (2 * e1), (-e2 - disc) / (2 * e1)):
                w = alpha * Ginv_c + Ginv_k
                det_term = abs(ci @ w)
                if det_term <= 0:
                    continue
                f = st.beta * np.log(det_term) + w @ st.K[i] - 0.5 * w @ st.G[i] @ w
                if f > best_f:
                    best, best_f = w, f
            if best is not None:
                W[i] = best
    return W


def fmllr_fit(model, features: Sequence[np.ndarray], alignments: Sequence, n_iters: int = 10,
              min_frames: int | None = None, init: LinearTransform | None = None) -> LinearTransform:
    """Affine speaker transform [A | b] maximising model likelihood.

    Falls back to identity when the speaker has fewer than ``min_frames``
    frames (default 10 * dim). ``trace`` records, per iteration, the
    auxiliary value before and after the row updates and the log-likelihood
    of the transformed data (Jacobian included) under the transform used
    for the posteriors.
    """
    D = model.dim
    min_frames = 10 * D if min_frames is None else min_frames
    n = sum(len(x) for x in features)
    W = init.as_affine() if init is not None else np.hstack([np.eye(D), np.zeros((D, 1))])
    if n < min_frames:
        t = LinearTransform.from_affine(W)
        t.trace = [{"fallback": True, "frames": n}]
        return t
    trace = []
    for _ in range(n_iters):
        cur = LinearTransform.from_affine(W)
        st = None
        for X, ali in zip(features, alignments):
            s = fmllr_accumulate(model, X, ali, cur)
            if st is None:
                st = s
            else:
                st += s
        before = fmllr_auxf(W, st)
        W_new = fmllr_update(W, st)
        after = fmllr_auxf(W_new, st)
        if after < before - 1e-9 * abs(before):
            raise TransformError("fMLLR auxiliary function decreased")
        trace.append({"aux_before": before, "aux_after": after, "loglik": st.loglik})
        W = W_new
    t = LinearTransform.from_affine(W)
    t.trace = trace
    return t
