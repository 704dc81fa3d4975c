"""Appearance features for mouth ROIs: zigzag-truncated 2-D DCT and
PCA "Eigenlips"."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.fft import dctn, idctn
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import archive


class FrontendError(ValueError):
    pass


def zigzag_order(rows: int, cols: int) -> list[tuple[int, int]]:
    """JPEG zigzag scan of a ``rows x cols`` grid.

    Anti-diagonals are visited in order of ``r + c``; odd diagonals run
    top-right to bottom-left, even ones the other way.
    """
    order = []
    for s in range(rows + cols - 1):
        lo, hi = max(0, s - cols + 1), min(s, rows - 1)
        rs = range(lo, hi + 1) if s % 2 else range(hi, lo - 1, -1)
        order.extend((r, s - r) for r in rs)
    return order


def dct2(image: np.ndarray) -> np.ndarray:
    return dctn(np.asarray(image, dtype=np.float64), type=2, norm="ortho")


def idct2(coeffs: np.ndarray) -> np.ndarray:
    return idctn(coeffs, type=2, norm="ortho")


def dct2_features(image: np.ndarray, n_coeffs: int = 44) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise FrontendError(f"expected a 2-D image, got shape {image.shape}")
    h, w = image.shape
    if n_coeffs > h * w:
        raise FrontendError(f"n_coeffs={n_coeffs} exceeds {h}x{w} coefficients")
    rr, cc = zip(*zigzag_order(h, w)[:n_coeffs])
    return dct2(image)[list(rr), list(cc)]


class DCTFeatures(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping T x H x W image stacks to T x n_coeffs."""

    def __init__(self, n_coeffs: int = 44):
        self.n_coeffs = n_coeffs

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3:
            raise FrontendError("expected a stack of 2-D images")
        _, h, w = X.shape
        if self.n_coeffs > h * w:
            raise FrontendError(f"n_coeffs={self.n_coeffs} exceeds {h}x{w} coefficients")
        rr, cc = map(list, zip(*zigzag_order(h, w)[: self.n_coeffs]))
        return dctn(X, type=2, norm="ortho", axes=(1, 2))[:, rr, cc]


@dataclass
class Eigenbasis:
    mean: np.ndarray          # (D,)
    components: np.ndarray    # (k, D), orthonormal rows
    eigenvalues: np.ndarray   # (k,), non-increasing

    @property
    def k(self) -> int:
        return len(self.components)

    def save(self, path):
        archive.write_feature_archive(
            {"mean": self.mean, "components": self.components, "eigenvalues": self.eigenvalues},
            path,
        )

    @classmethod
    def load(cls, path) -> "Eigenbasis":
        recs = archive.read_feature_archive(path)
        try:
            return cls(recs["mean"][0], recs["components"], recs["eigenvalues"][0])
        except KeyError as e:
            raise archive.ArchiveError(f"malformed archive: missing record {e}") from None


def pca_fit(images: Sequence[np.ndarray] | np.ndarray, k: int = 30) -> Eigenbasis:
    """Top-``k`` principal axes of row-major flattened images.

    Each component's sign is fixed so its largest-magnitude entry is positive.
    """
    X = np.asarray(images, dtype=np.float64)
    X = X.reshape(len(X), -1)
    n, d = X.shape
    if k > d:
        raise FrontendError(f"k={k} exceeds dimension {d}")
    if n < k + 1:
        raise FrontendError(f"need at least {k + 1} images, got {n}")
    mean = X.mean(axis=0)
    Xc = X - mean
    if d <= n:
        cov = Xc.T @ Xc / (n - 1)
        vals, vecs = np.linalg.eigh(cov)
        order = np.argsort(vals)[::-1][:k]
        vals, comps = vals[order], vecs[:, order].T
    else:
        # fewer samples than pixels: SVD of the centred data is cheaper
        _, s, vt = np.linalg.svd(Xc, full_matrices=False)
        vals, comps = s[:k] ** 2 / (n - 1), vt[:k]
    vals = np.clip(vals, 0.0, None)
    idx = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(len(comps)), idx])
    signs[signs == 0] = 1.0
    return Eigenbasis(mean, comps * signs[:, None], vals)


def pca_project(image: np.ndarray, basis: Eigenbasis) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    flat = x.reshape(-1) if x.ndim <= 2 and x.size == basis.mean.size else x.reshape(len(x), -1)
    if flat.shape[-1] != basis.mean.size:
        raise FrontendError(f"dimension mismatch: {flat.shape[-1]} != {basis.mean.size}")
    return (flat - basis.mean) @ basis.components.T


def pca_reconstruct(coeffs: np.ndarray, basis: Eigenbasis) -> np.ndarray:
    return basis.mean + np.asarray(coeffs) @ basis.components


def sample_pca_training_images(utterances: Iterable, per_utterance: int = 25,
                               seed: int = 0) -> np.ndarray:
    """Draw up to ``per_utterance`` frames from each utterance without
    replacement; shorter utterances contribute every frame."""
    rng = np.random.default_rng(seed)
    picked = []
    for u in utterances:
        frames = np.asarray(u).reshape(len(u), -1) if isinstance(u, np.ndarray) else u.flat()
        if len(frames) <= per_utterance:
            picked.append(frames)
        else:
            idx = np.sort(rng.choice(len(frames), per_utterance, replace=False))
            picked.append(frames[idx])
    if not picked:
        raise FrontendError("empty training set")
    return np.concatenate(picked)


class Eigenlips(TransformerMixin, BaseEstimator):
    """PCA appearance features.

    ``fit`` takes a matrix of flattened training images (one per row);
    ``transform`` accepts flattened rows or a T x H x W stack.
    """

    def __init__(self, n_components: int = 30):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        X = check_array(X.reshape(len(X), -1))
        self.basis_ = pca_fit(X, self.n_components)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "basis_")
        X = np.asarray(X, dtype=np.float64)
        X = X.reshape(len(X), -1)
        if X.shape[1] != self.n_features_in_:
            raise FrontendError(f"dimension mismatch: {X.shape[1]} != {self.n_features_in_}")
        return (X - self.basis_.mean) @ self.basis_.components.T

    def inverse_transform(self, Z):
        check_is_fitted(self, "basis_")
        return pca_reconstruct(Z, self.basis_)


def extract_features(utterances, kind: str, basis: Eigenbasis | None = None,
                     n_coeffs: int = 44) -> dict[str, np.ndarray]:
    """Raw per-utterance feature matrices for ``kind`` in {"dct", "eigenlips"}."""
    if kind == "dct":
        dct = DCTFeatures(n_coeffs)
        return {u.id: dct.transform(u.frames) for u in utterances}
    if kind == "eigenlips":
        if basis is None:
            raise FrontendError("eigenlips features need a fitted basis")
        return {u.id: pca_project(u.flat(), basis) for u in utterances}
    raise FrontendError(f"unknown feature kind {kind!r}")
