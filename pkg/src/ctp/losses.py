"""Contrastive losses over the similarity tensor and the pairwise baseline.

Plane names follow the two axes that vary inside the plane; the third
axis is held at the slice index ``ell``::

    "jk": text fixed   (axis 0), entries indexed (image, point)
    "ik": image fixed  (axis 1), entries indexed (text, point)
    "ij": point fixed  (axis 2), entries indexed (text, image)

The target inside slice ``ell`` is always the matched triple (ell, ell, ell).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ShapeError
from .similarity import SimilarityTensor, normalize_rows, similarity_tensor

PLANES = ("jk", "ik", "ij")
PLANE_AXIS = {"jk": 0, "ik": 1, "ij": 2}
STRATEGIES = ("nm", "mask")
DEFAULT_COEFFS = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)

# Presets for the pairwise baseline, (text-image, text-point, point-image).
POINT_ONLY_COEFFS = (0.0, 0.5, 0.5)
ALL_ENCODER_COEFFS = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)

INIT_TEMPERATURE = 0.07
MAX_LOGIT_SCALE = 100.0


def logit_scale_from_log(s: float) -> float:
    """exp(s) clamped to MAX_LOGIT_SCALE."""
    return float(min(math.exp(s), MAX_LOGIT_SCALE))


def initial_log_scale(temperature: float = INIT_TEMPERATURE) -> float:
    return math.log(1.0 / temperature)


@dataclass(frozen=True)
class FlattenedPlane:
    logits: np.ndarray
    target_pos: int
    index_map: list
    strategy: str


@dataclass
class LossBreakdown:
    total: float
    components: dict = field(default_factory=dict)
    coefficients: tuple = DEFAULT_COEFFS

    @property
    def per_plane(self) -> dict:
        return self.components


def _scores(tensor) -> np.ndarray:
    if isinstance(tensor, SimilarityTensor):
        return tensor.scores
    s = np.asarray(tensor, dtype=np.float64)
    if s.ndim != 3 or not (s.shape[0] == s.shape[1] == s.shape[2]):
        raise ShapeError(f"expected a b x b x b tensor, got {s.shape}")
    return s


def _check_plane(plane: str, strategy: str):
    if plane not in PLANE_AXIS:
        raise ValueError(f"unknown plane {plane!r}; expected one of {PLANES}")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def plane_slices(scores: np.ndarray, plane: str) -> np.ndarray:
    """View of the tensor as (ell, u, v) for the given plane."""
    return np.moveaxis(scores, PLANE_AXIS[plane], 0)


def keep_mask(b: int, strategy: str) -> np.ndarray:
    """Boolean (ell, u, v) array of entries that stay in the flattened plane.

    ``mask`` drops entries where exactly one varying index equals ell:
    those repeat the fixed-axis sample once, e.g. {1, 1, 2}. The matched
    target (ell, ell) is kept, leaving b*b - 2b + 2 entries per slice.
    """
    if strategy == "nm":
        return np.ones((b, b, b), dtype=bool)
    ell = np.arange(b)[:, None, None]
    u = np.arange(b)[None, :, None]
    v = np.arange(b)[None, None, :]
    return ~((u == ell) ^ (v == ell))


def flatten_plane(tensor, plane: str, ell: int, strategy: str = "mask") -> FlattenedPlane:
    """Flatten slice ``ell`` of ``plane`` row-major over (u, v)."""
    _check_plane(plane, strategy)
    s = _scores(tensor)
    b = s.shape[0]
    if not 0 <= ell < b:
        raise IndexError(f"ell={ell} out of range for batch size {b}")
    sl = plane_slices(s, plane)[ell]
    keep = keep_mask(b, strategy)[ell]
    us, vs = np.nonzero(keep)
    index_map = list(zip(us.tolist(), vs.tolist()))
    target_pos = index_map.index((ell, ell))
    return FlattenedPlane(sl[us, vs].copy(), target_pos, index_map, strategy)


def cross_entropy(logits, target: int, scale: float = 1.0) -> float:
    """-log softmax(scale * logits)[target], stabilized by max subtraction."""
    z = np.asarray(logits, dtype=np.float64).ravel()
    if z.size == 0:
        raise ValueError("empty logits")
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    if not 0 <= target < z.size:
        raise IndexError(f"target {target} out of range for {z.size} logits")
    z = scale * z
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    # clamp the last-ulp negative that appears when one logit dominates
    return max(lse - z[target], 0.0)


def _plane_ce(scores: np.ndarray, plane: str, strategy: str, scale: float):
    """Per-slice cross-entropies and softmax for every ell at once."""
    b = scores.shape[0]
    z = scale * plane_slices(scores, plane)
    keep = keep_mask(b, strategy)
    zm = np.where(keep, z, -np.inf).reshape(b, -1)
    lse = logsumexp(zm, axis=1)
    idx = np.arange(b)
    target = z[idx, idx, idx]
    ce = np.maximum(lse - target, 0.0)
    prob = np.exp(zm - lse[:, None]).reshape(b, b, b)
    return ce, prob


def plane_loss(tensor, plane: str, strategy: str = "mask", scale: float = 1.0,
               reduction: str = "sum") -> float:
    """Cross-entropy summed (or averaged) over all b slices of one plane."""
    _check_plane(plane, strategy)
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    s = _scores(tensor)
    ce, _ = _plane_ce(s, plane, strategy, scale)
    total = float(ce.sum())
    if reduction == "mean":
        return total / s.shape[0]
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return total


def _check_coeffs(coefficients) -> tuple:
    c = tuple(float(x) for x in coefficients)
    if len(c) != 3:
        raise ValueError("need exactly three coefficients")
    if any(x < 0 for x in c):
        raise ValueError(f"coefficients must be non-negative, got {c}")
    return c


def tensor_loss(t, i, p, metric: str = "l2_mapped", strategy: str = "mask",
                coefficients=DEFAULT_COEFFS, scale: float = 1.0,
                reduction: str = "sum") -> LossBreakdown:
    """Weighted sum of the jk, ik and ij plane losses.

    Rows of ``t``, ``i``, ``p`` are normalized first; row r of each batch is
    one aligned triplet.
    """
    coeffs = _check_coeffs(coefficients)
    t, i, p = (normalize_rows(x) for x in (t, i, p))
    st = similarity_tensor(t, i, p, metric)
    parts = {pl: plane_loss(st, pl, strategy, scale, reduction) for pl in PLANES}
    total = sum(c * parts[pl] for c, pl in zip(coeffs, PLANES))
    return LossBreakdown(float(total), parts, coeffs)


def clip_pair_loss(a, b, scale: float = 1.0) -> float:
    """Symmetric CLIP loss: mean of row-wise and column-wise diagonal CE."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    a, b = normalize_rows(a), normalize_rows(b)
    if a.shape != b.shape:
        raise ShapeError(f"batch shapes differ: {a.shape} vs {b.shape}")
    z = scale * (a @ b.T)
    diag = np.diag(z)
    rows = logsumexp(z, axis=1) - diag
    cols = logsumexp(z, axis=0) - diag
    return float(0.5 * (np.maximum(rows, 0).mean() + np.maximum(cols, 0).mean()))


PAIR_NAMES = ("T-I", "T-P", "P-I")


def pairwise_loss(t, i, p, coefficients=ALL_ENCODER_COEFFS, scale: float = 1.0) -> LossBreakdown:
    """Weighted sum of the text-image, text-point and point-image CLIP losses."""
    coeffs = _check_coeffs(coefficients)
    parts = {
        "T-I": clip_pair_loss(t, i, scale),
        "T-P": clip_pair_loss(t, p, scale),
        "P-I": clip_pair_loss(p, i, scale),
    }
    total = sum(c * parts[k] for c, k in zip(coeffs, PAIR_NAMES))
    return LossBreakdown(float(total), parts, coeffs)


LOSS_TAGS = ("ctp_mask", "ctp_nm", "ctp_cosine", "pairwise")


@dataclass(frozen=True)
class LossConfig:
    """Which loss to train with; built from a tag such as ``ctp_mask``."""

    kind: str = "tensor"
    metric: str = "l2_mapped"
    strategy: str = "mask"
    coefficients: tuple = DEFAULT_COEFFS
    reduction: str = "sum"

    def __post_init__(self):
        if self.kind not in ("tensor", "pairwise"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "tensor":
            _check_plane("jk", self.strategy)
            if self.metric not in ("cosine", "l2_mapped"):
                raise ValueError(f"unknown metric {self.metric!r}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        object.__setattr__(self, "coefficients", _check_coeffs(self.coefficients))

    @classmethod
    def from_tag(cls, tag: str, coefficients=None, reduction: str = "sum") -> "LossConfig":
        if tag == "ctp_mask":
            kw = dict(kind="tensor", metric="l2_mapped", strategy="mask")
        elif tag == "ctp_nm":
            kw = dict(kind="tensor", metric="l2_mapped", strategy="nm")
        elif tag == "ctp_cosine":
            kw = dict(kind="tensor", metric="cosine", strategy="mask")
        elif tag == "pairwise":
            kw = dict(kind="pairwise")
        else:
            raise ValueError(f"unknown loss tag {tag!r}; expected one of {LOSS_TAGS}")
        if coefficients is not None:
            kw["coefficients"] = coefficients
        return cls(reduction=reduction, **kw)

    @property
    def tag(self) -> str:
        if self.kind == "pairwise":
            return "pairwise"
        if self.metric == "cosine":
            return "ctp_cosine"
        return "ctp_mask" if self.strategy == "mask" else "ctp_nm"

    def __call__(self, t, i, p, scale: float) -> LossBreakdown:
        if self.kind == "pairwise":
            return pairwise_loss(t, i, p, self.coefficients, scale)
        return tensor_loss(t, i, p, self.metric, self.strategy, self.coefficients,
                           scale, self.reduction)
