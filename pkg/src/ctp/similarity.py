"""Normalization and similarity functions over batches of embeddings.

Tensor axis convention, used everywhere in the package::

    axis 0 -> text index   (i)
    axis 1 -> image index  (j)
    axis 2 -> point index  (k)

Both tensor metrics are symmetric in the three modality roles, so the
convention only fixes which plane is which.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import DegenerateInputError, ShapeError, UnsupportedModalityCount

Metric = Literal["cosine", "l2_mapped"]
Modality = Literal["text", "image", "point"]

MODALITIES: tuple[str, ...] = ("text", "image", "point")
UNIT_NORM_TOL = 1e-6
MAX_BATCH = 512


@dataclass(frozen=True)
class FeatureBatch:
    """A b x d block of embeddings for one modality."""

    rows: np.ndarray
    modality: str = "text"
    normalized: bool = False

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise ShapeError(f"feature batch must be b x d with b, d >= 1, got {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise DegenerateInputError("feature batch contains non-finite values")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.normalized:
            norms = np.linalg.norm(rows, axis=1)
            if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
                raise ValueError("batch flagged normalized has rows off the unit sphere")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    def __array__(self, dtype=None, copy=None):
        return self.rows if dtype is None else self.rows.astype(dtype)

    def __len__(self):
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def unit(self) -> "FeatureBatch":
        if self.normalized:
            return self
        return FeatureBatch(normalize_rows(self.rows), self.modality, normalized=True)


@dataclass(frozen=True)
class SimilarityTensor:
    """Dense b x b x b score cube tagged with the metric that produced it."""

    scores: np.ndarray
    metric: str

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 3 or not (s.shape[0] == s.shape[1] == s.shape[2]):
            raise ShapeError(f"similarity tensor must be b x b x b, got {s.shape}")
        if self.metric not in ("cosine", "l2_mapped"):
            raise ValueError(f"unknown metric {self.metric!r}")
        object.__setattr__(self, "scores", s)

    @property
    def b(self) -> int:
        return self.scores.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.scores if dtype is None else self.scores.astype(dtype)


def normalize(v) -> np.ndarray:
    """Scale a vector to unit Euclidean norm.

    Raises DegenerateInputError for a zero vector instead of returning NaNs.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"expected a non-empty vector, got shape {v.shape}")
    n = np.linalg.norm(v)
    if not np.isfinite(n):
        raise DegenerateInputError("vector contains non-finite values")
    if n == 0.0:
        raise DegenerateInputError("zero norm")
    return v / n


def normalize_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D batch, got shape {x.shape}")
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(n == 0.0):
        raise DegenerateInputError(f"zero norm in row(s) {np.flatnonzero(n[:, 0] == 0.0).tolist()}")
    return x / n


def _unit_batch(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"{name}: expected a b x d batch, got shape {x.shape}")
    norms = np.linalg.norm(x, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        raise ValueError(f"{name}: rows must be unit-norm (call normalize_rows first)")
    return x


def _check_triplet(t, i, p, max_batch: int = MAX_BATCH):
    t, i, p = _unit_batch(t, "text"), _unit_batch(i, "image"), _unit_batch(p, "point")
    if not (t.shape == i.shape == p.shape):
        raise ShapeError(f"batch shapes differ: {t.shape}, {i.shape}, {p.shape}")
    if t.shape[0] > max_batch:
        raise ShapeError(f"batch size {t.shape[0]} exceeds dense-tensor limit {max_batch}")
    return t, i, p


def cosine_pair_matrix(a, b) -> np.ndarray:
    """Entry (r, c) is the dot product of unit rows a[r] and b[c]."""
    a, b = _unit_batch(a, "a"), _unit_batch(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return a @ b.T


def pairwise_distances(a, b) -> np.ndarray:
    """Unsquared Euclidean distances, computed from explicit differences.

    The expanded ``|a|^2 + |b|^2 - 2ab`` form loses ~8 digits near zero
    distance, which matters for matched triplets late in training.
    """
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("rcd,rcd->rc", diff, diff))


def cosine_tensor(t, i, p, max_batch: int = MAX_BATCH) -> SimilarityTensor:
    """Mean of the three pairwise dot products for every (text, image, point) triple."""
    t, i, p = _check_triplet(t, i, p, max_batch)
    ti = t @ i.T
    tp = t @ p.T
    ip = i @ p.T
    s = (ti[:, :, None] + tp[:, None, :] + ip[None, :, :]) / 3.0
    return SimilarityTensor(s, "cosine")


def l2_tensor(t, i, p, max_batch: int = MAX_BATCH) -> np.ndarray:
    """Sum of the three unsquared pairwise distances for every triple."""
    t, i, p = _check_triplet(t, i, p, max_batch)
    d_ti = pairwise_distances(t, i)
    d_tp = pairwise_distances(t, p)
    d_ip = pairwise_distances(i, p)
    return d_ti[:, :, None] + d_tp[:, None, :] + d_ip[None, :, :]


def l_max(q: int = 3) -> float:
    """Largest possible sum of pairwise distances among q unit vectors.

    Only q = 3 is supported; the equilateral configuration gives 3*sqrt(3).
    """
    if q != 3:
        raise UnsupportedModalityCount(f"unsupported q={q}: only q=3 has a known maximum")
    return 3.0 * math.sqrt(3.0)


def map_l2(raw, q: int = 3) -> SimilarityTensor | np.ndarray:
    """Map distance sums to [0, 1] via ``1 - raw / l_max(q)``.

    A b x b x b input comes back as a SimilarityTensor; any other shape is
    mapped elementwise and returned as an array.
    """
    lm = l_max(q)
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise ValueError("distance sums must be non-negative")
    mapped = 1.0 - raw / lm
    if raw.ndim == 3 and raw.shape[0] == raw.shape[1] == raw.shape[2]:
        return SimilarityTensor(mapped, "l2_mapped")
    return mapped


def similarity_tensor(t, i, p, metric: str = "l2_mapped", max_batch: int = MAX_BATCH) -> SimilarityTensor:
    if metric == "cosine":
        return cosine_tensor(t, i, p, max_batch)
    if metric == "l2_mapped":
        return map_l2(l2_tensor(t, i, p, max_batch))
    raise ValueError(f"unknown metric {metric!r}")


def combination_counts(b: int, q: int = 3) -> tuple[int, int]:
    """(entries in the full similarity tensor, entries covered by all pairwise matrices)."""
    if b < 1 or q < 2:
        raise ValueError("need b >= 1 and q >= 2")
    return b**q, q * (q - 1) // 2 * b * b
