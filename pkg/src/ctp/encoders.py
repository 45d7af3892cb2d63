"""Toy trainable encoders for the three modalities.

Text and image inputs are raw vectors fed through small ReLU MLPs with a
linear output layer (the projection into the shared embedding space).
Point clouds go through a per-point MLP, a max pool restricted to valid
(unpadded) points, and a head MLP, which keeps the encoder invariant to
point order and blind to zero padding.

Every forward function has a ``*_backward`` partner; gradients are checked
against finite differences in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .losses import initial_log_scale
from .similarity import FeatureBatch, normalize_rows


@dataclass
class MlpParams:
    layers: list  # [(weight (out, in), bias (out,)), ...]
    activation: str = "relu"
    out_activation: bool = False

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("an MLP needs at least one layer")
        for n, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {n}: weight {w.shape} and bias {b.shape} do not match")
            if n and w.shape[1] != self.layers[n - 1][0].shape[0]:
                raise ShapeError(f"layer {n} expects {w.shape[1]} inputs, previous layer gives "
                                 f"{self.layers[n - 1][0].shape[0]}")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def arrays(self, prefix: str) -> dict:
        out = {}
        for n, (w, b) in enumerate(self.layers):
            out[f"{prefix}.{n}.weight"] = w
            out[f"{prefix}.{n}.bias"] = b
        return out


@dataclass
class SetEncoderParams:
    point_mlp: MlpParams
    head_mlp: MlpParams

    def __post_init__(self):
        if self.point_mlp.in_dim != 3:
            raise ShapeError(f"point MLP must take 3 coordinates, got {self.point_mlp.in_dim}")
        if self.head_mlp.in_dim != self.point_mlp.out_dim:
            raise ShapeError("head MLP input must match pooled feature size")

    @property
    def out_dim(self) -> int:
        return self.head_mlp.out_dim

    def arrays(self, prefix: str) -> dict:
        return {**self.point_mlp.arrays(f"{prefix}.local"), **self.head_mlp.arrays(f"{prefix}.head")}


@dataclass
class EncoderParams:
    """All trainable state: three encoders and the log of the logit scale."""

    text: MlpParams
    image: MlpParams
    point: SetEncoderParams
    log_scale: np.ndarray = field(default_factory=lambda: np.array(initial_log_scale()))

    def __post_init__(self):
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(())
        dims = {self.text.out_dim, self.image.out_dim, self.point.out_dim}
        if len(dims) != 1:
            raise ShapeError(f"encoders disagree on embedding size: {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.text.out_dim

    def arrays(self) -> dict:
        """Name -> array views in a fixed order; writes go through to the params."""
        return {
            **self.text.arrays("text"),
            **self.image.arrays("image"),
            **self.point.arrays("point"),
            "log_scale": self.log_scale,
        }

    def copy(self) -> "EncoderParams":
        return self.with_arrays({k: v.copy() for k, v in self.arrays().items()})

    def with_arrays(self, arrays: dict) -> "EncoderParams":
        """Same architecture, parameters taken from ``arrays`` (keys as in ``arrays()``)."""

        def mlp(src: MlpParams, prefix: str) -> MlpParams:
            layers = [(np.asarray(arrays[f"{prefix}.{n}.weight"], dtype=np.float64),
                       np.asarray(arrays[f"{prefix}.{n}.bias"], dtype=np.float64))
                      for n in range(len(src.layers))]
            return MlpParams(layers, src.activation, src.out_activation)

        return EncoderParams(
            text=mlp(self.text, "text"),
            image=mlp(self.image, "image"),
            point=SetEncoderParams(mlp(self.point.point_mlp, "point.local"),
                                   mlp(self.point.head_mlp, "point.head")),
            log_scale=np.array(arrays["log_scale"], dtype=np.float64),
        )

    def architecture(self) -> dict:
        def sizes(m: MlpParams):
            return [m.in_dim] + [w.shape[0] for w, _ in m.layers]

        return {
            "text": sizes(self.text),
            "image": sizes(self.image),
            "point_local": sizes(self.point.point_mlp),
            "point_head": sizes(self.point.head_mlp),
        }


def init_params(sizes, seed: int, out_activation: bool = False) -> MlpParams:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``.

    ``sizes`` lists layer widths from input to output, e.g. [8, 16, 32].
    """
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValueError(f"need at least input and output sizes >= 1, got {sizes}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return MlpParams(layers, out_activation=out_activation)


@dataclass(frozen=True)
class EncoderSpec:
    text_in: int
    image_in: int
    dim: int = 32
    hidden: int = 64
    point_hidden: int = 64

    def build(self, seed: int) -> EncoderParams:
        seeds = np.random.SeedSequence(seed).spawn(4)
        s = [int(x.generate_state(1)[0]) for x in seeds]
        return EncoderParams(
            text=init_params([self.text_in, self.hidden, self.dim], s[0]),
            image=init_params([self.image_in, self.hidden, self.dim], s[1]),
            point=SetEncoderParams(
                init_params([3, self.point_hidden, self.point_hidden], s[2], out_activation=True),
                init_params([self.point_hidden, self.hidden, self.dim], s[3]),
            ),
        )


def _mlp_forward_cached(params: MlpParams, x: np.ndarray):
    acts = []
    h = x
    last = len(params.layers) - 1
    for n, (w, b) in enumerate(params.layers):
        acts.append(h)
        h = h @ w.T + b
        if params.activation == "relu" and (n < last or params.out_activation):
            h = np.maximum(h, 0.0)
    return h, acts


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Apply the MLP to one vector or to each row of a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"input has {x.shape[-1]} features, MLP expects {params.in_dim}")
    single = x.ndim == 1
    out, _ = _mlp_forward_cached(params, np.atleast_2d(x))
    return out[0] if single else out


def mlp_backward(params: MlpParams, acts: list, out: np.ndarray, grad_out: np.ndarray):
    """Gradients w.r.t. the MLP input and each layer given the forward cache."""
    grads = [None] * len(params.layers)
    g = grad_out
    last = len(params.layers) - 1
    for n in range(last, -1, -1):
        w, _ = params.layers[n]
        if params.activation == "relu" and (n < last or params.out_activation):
            post = out if n == last else acts[n + 1]
            g = g * (post > 0)
        grads[n] = (g.T @ acts[n], g.sum(axis=0))
        g = g @ w
    return g, grads


def _pool_forward(params: SetEncoderParams, points: np.ndarray, mask: np.ndarray):
    B, N, _ = points.shape
    if np.any(mask.sum(axis=1) == 0):
        raise DegenerateInputError("point cloud has no valid points")
    valid = points[mask]
    local, local_acts = _mlp_forward_cached(params.point_mlp, valid)
    H = local.shape[1]
    feats = np.full((B, N, H), -np.inf)
    feats[mask] = local
    arg = feats.argmax(axis=1)
    pooled = np.take_along_axis(feats, arg[:, None, :], axis=1)[:, 0, :]
    return pooled, (valid, local, local_acts, arg)


def set_encode(params: SetEncoderParams, points, mask=None) -> np.ndarray:
    """Encode one point cloud (N x 3) or a padded batch (B x N x 3).

    ``mask`` marks real points; padded rows never reach the pool.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 2
    if single:
        pts = pts[None]
    if pts.ndim != 3 or pts.shape[-1] != 3:
        raise ShapeError(f"expected N x 3 or B x N x 3 points, got {np.shape(points)}")
    m = np.ones(pts.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    m = m.reshape(pts.shape[:2])
    pooled, _ = _pool_forward(params, pts, m)
    out, _ = _mlp_forward_cached(params.head_mlp, pooled)
    return out[0] if single else out


def mlp_forward_backward(params: MlpParams, x: np.ndarray):
    out, acts = _mlp_forward_cached(params, x)

    def backward(grad_out):
        return mlp_backward(params, acts, out, grad_out)

    return out, backward


def set_forward_backward(params: SetEncoderParams, points: np.ndarray, mask: np.ndarray):
    pooled, (valid, local, local_acts, arg) = _pool_forward(params, points, mask)
    out, head_acts = _mlp_forward_cached(params.head_mlp, pooled)
    B, N, _ = points.shape
    H = pooled.shape[1]

    def backward(grad_out):
        g_pooled, head_grads = mlp_backward(params.head_mlp, head_acts, out, grad_out)
        g_feats = np.zeros((B, N, H))
        np.put_along_axis(g_feats, arg[:, None, :], g_pooled[:, None, :], axis=1)
        _, local_grads = mlp_backward(params.point_mlp, local_acts, local, g_feats[mask])
        return local_grads, head_grads

    return out, backward


def encode_raw(params: EncoderParams, text, image, points, mask):
    """Unnormalized embeddings for stacked modality inputs."""
    t = mlp_forward(params.text, np.atleast_2d(text))
    i = mlp_forward(params.image, np.atleast_2d(image))
    p = set_encode(params.point, points, mask)
    return t, i, np.atleast_2d(p)


def encode_batch(params: EncoderParams, records, n_points: int | None = None):
    """Encode a batch and return unit-normalized text, image and point FeatureBatches.

    ``records`` is either a TripletArrays block or a list of TripletRecords;
    point clouds in the latter are padded or sampled to ``n_points``.
    """
    from .dataset import TripletArrays, stack_records

    if isinstance(records, TripletArrays):
        arr = records
    else:
        records = list(records)
        if not records:
            raise ValueError("cannot encode an empty batch")
        arr = stack_records(records, n_points)
    t, i, p = encode_raw(params, arr.text, arr.image, arr.points, arr.mask)
    return (FeatureBatch(normalize_rows(t), "text", normalized=True),
            FeatureBatch(normalize_rows(i), "image", normalized=True),
            FeatureBatch(normalize_rows(p), "point", normalized=True))
