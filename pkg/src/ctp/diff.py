"""Analytic gradients, finite-difference checking and a loop-based loss oracle.

Gradients are hand-derived closed forms.  The chain, for the tensor loss::

    raw f --normalize--> unit f --similarity--> S --scale--> logits --CE--> loss

Distances use the unsquared norm, so d|a-b|/da = (a-b)/|a-b|.  At a
coincident pair the derivative is defined as 0, and the denominator is
floored at DIST_FLOOR elsewhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .encoders import EncoderParams, encode_raw, mlp_forward_backward, set_forward_backward
from .errors import NonFiniteLossError
from .losses import (
    LOSS_TAGS,
    MAX_LOGIT_SCALE,
    PLANE_AXIS,
    PLANES,
    LossConfig,
    _plane_ce,
    logit_scale_from_log,
    plane_slices,
)
from .similarity import l_max, normalize_rows, pairwise_distances, similarity_tensor

DIST_FLOOR = 1e-12
FEATURE_KEYS = ("text", "image", "point")


def normalize_backward(raw: np.ndarray, unit: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pull a gradient on f/|f| back to f."""
    n = np.linalg.norm(raw, axis=1, keepdims=True)
    return (g - unit * np.sum(unit * g, axis=1, keepdims=True)) / n


def distance_backward(x: np.ndarray, y: np.ndarray, g: np.ndarray):
    """Gradients of sum(g * D) with D[r, c] = |x[r] - y[c]|."""
    d = pairwise_distances(x, y)
    w = np.where(d > 0, g / np.maximum(d, DIST_FLOOR), 0.0)
    gx = w.sum(axis=1)[:, None] * x - w @ y
    gy = w.sum(axis=0)[:, None] * y - w.T @ x
    return gx, gy


def _tensor_grad_unit(t, i, p, cfg: LossConfig, scale: float):
    """Loss and gradients w.r.t. unit features and the (unclamped) scale."""
    b = t.shape[0]
    s = similarity_tensor(t, i, p, cfg.metric).scores
    red = 1.0 / b if cfg.reduction == "mean" else 1.0
    g_s = np.zeros_like(s)
    g_scale = 0.0
    total = 0.0
    idx = np.arange(b)
    for coef, plane in zip(cfg.coefficients, PLANES):
        ce, prob = _plane_ce(s, plane, cfg.strategy, scale)
        total += coef * red * ce.sum()
        if coef == 0.0:
            continue
        delta = prob.copy()
        delta[idx, idx, idx] -= 1.0
        g_scale += coef * red * np.sum(delta * plane_slices(s, plane))
        g_s += np.moveaxis(coef * red * scale * delta, 0, PLANE_AXIS[plane])

    a = g_s.sum(axis=2)   # (text, image)
    bb = g_s.sum(axis=1)  # (text, point)
    c = g_s.sum(axis=0)   # (image, point)
    if cfg.metric == "cosine":
        gt = (a @ i + bb @ p) / 3.0
        gi = (a.T @ t + c @ p) / 3.0
        gp = (bb.T @ t + c.T @ i) / 3.0
    else:
        lm = l_max(3)
        gt1, gi1 = distance_backward(t, i, -a / lm)
        gt2, gp1 = distance_backward(t, p, -bb / lm)
        gi2, gp2 = distance_backward(i, p, -c / lm)
        gt, gi, gp = gt1 + gt2, gi1 + gi2, gp1 + gp2
    return float(total), gt, gi, gp, float(g_scale)


def _clip_grad_unit(a, b, scale: float):
    n = a.shape[0]
    m = a @ b.T
    z = scale * m
    lse_r = logsumexp(z, axis=1)
    lse_c = logsumexp(z, axis=0)
    diag = np.diag(z)
    loss = 0.5 * (np.maximum(lse_r - diag, 0).mean() + np.maximum(lse_c - diag, 0).mean())
    eye = np.eye(n)
    dz = 0.5 * ((np.exp(z - lse_r[:, None]) - eye) + (np.exp(z - lse_c[None, :]) - eye)) / n
    dm = scale * dz
    return float(loss), dm @ b, dm.T @ a, float(np.sum(dz * m))


def _pairwise_grad_unit(t, i, p, cfg: LossConfig, scale: float):
    (wa, wb, wc) = cfg.coefficients
    l1, gt1, gi1, s1 = _clip_grad_unit(t, i, scale)
    l2, gt2, gp2, s2 = _clip_grad_unit(t, p, scale)
    l3, gp3, gi3, s3 = _clip_grad_unit(p, i, scale)
    total = wa * l1 + wb * l2 + wc * l3
    gt = wa * gt1 + wb * gt2
    gi = wa * gi1 + wc * gi3
    gp = wb * gp2 + wc * gp3
    return float(total), gt, gi, gp, wa * s1 + wb * s2 + wc * s3


def _scale_and_chain(log_scale: float):
    raw = math.exp(float(log_scale))
    if raw >= MAX_LOGIT_SCALE:
        return MAX_LOGIT_SCALE, 0.0
    return raw, raw


def loss_and_grad_features(cfg: LossConfig, text, image, point, log_scale: float):
    """Loss and gradients w.r.t. raw (unnormalized) features and the log scale."""
    raws = [np.asarray(x, dtype=np.float64) for x in (text, image, point)]
    units = [normalize_rows(x) for x in raws]
    scale, dscale_dlog = _scale_and_chain(log_scale)
    if cfg.kind == "pairwise":
        loss, gt, gi, gp, gs = _pairwise_grad_unit(*units, cfg, scale)
    else:
        loss, gt, gi, gp, gs = _tensor_grad_unit(*units, cfg, scale)
    grads = {
        key: normalize_backward(r, u, g)
        for key, r, u, g in zip(FEATURE_KEYS, raws, units, (gt, gi, gp))
    }
    grads["log_scale"] = np.array(gs * dscale_dlog)
    return loss, grads


def loss_and_grad_params(cfg: LossConfig, params: EncoderParams, batch, frozen=()):
    """Loss and gradients w.r.t. every encoder parameter for one batch.

    ``batch`` is a TripletArrays block.  Frozen encoders get no gradient
    entries at all.
    """
    t, bt = mlp_forward_backward(params.text, batch.text)
    i, bi = mlp_forward_backward(params.image, batch.image)
    p, bp = set_forward_backward(params.point, batch.points, batch.mask)
    loss, g = loss_and_grad_features(cfg, t, i, p, float(params.log_scale))
    grads = {"log_scale": g["log_scale"]}
    if "text" not in frozen:
        _, layers = bt(g["text"])
        grads.update(_named("text", layers))
    if "image" not in frozen:
        _, layers = bi(g["image"])
        grads.update(_named("image", layers))
    if "point" not in frozen:
        local, head = bp(g["point"])
        grads.update(_named("point.local", local))
        grads.update(_named("point.head", head))
    return loss, grads


def _named(prefix, layers):
    out = {}
    for n, (gw, gb) in enumerate(layers):
        out[f"{prefix}.{n}.weight"] = gw
        out[f"{prefix}.{n}.bias"] = gb
    return out


def grad_loss(cfg: LossConfig, inputs, batch=None):
    """Loss value and GradientSet (name -> array) for one configuration.

    ``inputs`` is either an EncoderParams (then ``batch`` supplies the raw
    triplets) or a mapping with raw ``text``/``image``/``point`` feature
    batches and a ``log_scale`` scalar.
    """
    if isinstance(inputs, EncoderParams):
        if batch is None:
            raise ValueError("encoder gradients need a batch")
        return loss_and_grad_params(cfg, inputs, batch)
    return loss_and_grad_features(cfg, inputs["text"], inputs["image"], inputs["point"],
                                  float(inputs["log_scale"]))


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_parameter: dict = field(default_factory=dict)
    epsilon: float = 1e-5

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def finite_diff_check(value_and_grad: Callable, inputs: dict, epsilon: float = 1e-5,
                      elementwise: bool = False, value_fn: Callable | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``value_and_grad(arrays)`` maps a dict of arrays to ``(loss, grads)``.
    Each parameter's error is ``|a - n| / max(|a|, |n|, 1e-8)`` with ``|.|``
    the Euclidean norm over that parameter's coordinates.  With
    ``elementwise=True`` the same ratio is taken per coordinate and the
    worst one is reported; coordinates whose true gradient is below ~1e-6
    of the loss then hit the rounding floor of the difference quotient.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    _, analytic = value_and_grad(base)
    if value_fn is None:
        def value_fn(arrays):
            return value_and_grad(arrays)[0]
    per = {}
    for name, arr in base.items():
        if name not in analytic:
            continue
        ga = np.asarray(analytic[name], dtype=np.float64)
        if ga.shape != arr.shape:
            raise ValueError(f"gradient for {name} has shape {ga.shape}, parameter {arr.shape}")
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = num.reshape(-1)
        for c in range(flat.size):
            orig = flat[c]
            flat[c] = orig + epsilon
            fp = value_fn(base)
            flat[c] = orig - epsilon
            fm = value_fn(base)
            flat[c] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteLossError(f"non-finite loss perturbing {name}[{c}]")
            nflat[c] = (fp - fm) / (2 * epsilon)
        if elementwise:
            denom = np.maximum(np.maximum(np.abs(ga), np.abs(num)), 1e-8)
            per[name] = float(np.max(np.abs(ga - num) / denom)) if arr.size else 0.0
        else:
            na, nn = np.linalg.norm(ga), np.linalg.norm(num)
            per[name] = float(np.linalg.norm(ga - num) / max(na, nn, 1e-8))
    worst = max(per.values()) if per else 0.0
    return GradCheckReport(worst, per, epsilon)


def loss_value_params(cfg: LossConfig, params: EncoderParams, batch) -> float:
    t, i, p = encode_raw(params, batch.text, batch.image, batch.points, batch.mask)
    return cfg(t, i, p, logit_scale_from_log(float(params.log_scale))).total


def check_params_grad(cfg: LossConfig, params: EncoderParams, batch, epsilon: float = 1e-5,
                      corrupt: str | None = None) -> GradCheckReport:
    """Finite-difference check of ``loss_and_grad_params`` end to end.

    ``corrupt`` names a gradient whose sign is flipped before comparison, so
    the harness itself can be shown to fail.
    """

    def fn(arrays):
        loss, g = loss_and_grad_params(cfg, params.with_arrays(arrays), batch)
        if corrupt in g:
            g[corrupt] = -g[corrupt]
        return loss, g

    def value(arrays):
        return loss_value_params(cfg, params.with_arrays(arrays), batch)

    return finite_diff_check(fn, params.arrays(), epsilon, value_fn=value)


def check_feature_grad(cfg: LossConfig, text, image, point, log_scale: float,
                       epsilon: float = 1e-5, corrupt: str | None = None) -> GradCheckReport:
    def fn(a):
        loss, g = loss_and_grad_features(cfg, a["text"], a["image"], a["point"], float(a["log_scale"]))
        if corrupt in g:
            g[corrupt] = -g[corrupt]
        return loss, g

    def value(a):
        return cfg(a["text"], a["image"], a["point"], logit_scale_from_log(float(a["log_scale"]))).total

    inputs = {"text": text, "image": image, "point": point, "log_scale": np.array(log_scale)}
    return finite_diff_check(fn, inputs, epsilon, value_fn=value)


# ----------------------------------------------------------------------------
# Loop oracle.  Deliberately shares no code with similarity.py / losses.py.
# ----------------------------------------------------------------------------

def _unit(row):
    n = math.sqrt(sum(x * x for x in row))
    if n == 0.0:
        raise ValueError("zero norm")
    return [x / n for x in row]


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def _dist(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def _ce(logits, target):
    m = max(logits)
    return m + math.log(sum(math.exp(z - m) for z in logits)) - logits[target]


def brute_force_loss(t, i, p, metric: str = "l2_mapped", strategy: str = "mask",
                     coefficients=(1 / 3, 1 / 3, 1 / 3), scale: float = 1.0) -> float:
    """Tensor loss by explicit enumeration of all b**3 triples (b <= 16)."""
    T = [_unit(list(map(float, r))) for r in np.asarray(t)]
    I = [_unit(list(map(float, r))) for r in np.asarray(i)]
    P = [_unit(list(map(float, r))) for r in np.asarray(p)]
    b = len(T)
    if not (len(I) == len(P) == b):
        raise ValueError("batch sizes differ")
    if b > 16:
        raise ValueError("oracle is limited to b <= 16")
    lmax = 3 * math.sqrt(3)

    def score(x, y, z):
        if metric == "cosine":
            return (_dot(x, y) + _dot(x, z) + _dot(y, z)) / 3
        return 1 - (_dist(x, y) + _dist(x, z) + _dist(y, z)) / lmax

    S = [[[score(T[a], I[c], P[e]) for e in range(b)] for c in range(b)] for a in range(b)]

    def entry(plane, ell, u, v):
        if plane == "jk":
            return S[ell][u][v]
        if plane == "ik":
            return S[u][ell][v]
        return S[u][v][ell]

    total = 0.0
    for coef, plane in zip(coefficients, ("jk", "ik", "ij")):
        plane_sum = 0.0
        for ell in range(b):
            logits, target = [], None
            for u in range(b):
                for v in range(b):
                    hits = (u == ell) + (v == ell)
                    if strategy == "mask" and hits == 1:
                        continue
                    if u == ell and v == ell:
                        target = len(logits)
                    logits.append(scale * entry(plane, ell, u, v))
            plane_sum += _ce(logits, target)
        total += coef * plane_sum
    return total


def brute_force_pair_loss(a, b, scale: float = 1.0) -> float:
    """Symmetric two-modality contrastive loss by explicit loops."""
    A = [_unit(list(map(float, r))) for r in np.asarray(a)]
    B = [_unit(list(map(float, r))) for r in np.asarray(b)]
    n = len(A)
    rows = sum(_ce([scale * _dot(A[r], B[c]) for c in range(n)], r) for r in range(n)) / n
    cols = sum(_ce([scale * _dot(A[r], B[c]) for r in range(n)], c) for c in range(n)) / n
    return 0.5 * (rows + cols)


def brute_force_pairwise_loss(t, i, p, coefficients=(1 / 3, 1 / 3, 1 / 3), scale: float = 1.0) -> float:
    wa, wb, wc = coefficients
    return (wa * brute_force_pair_loss(t, i, scale) + wb * brute_force_pair_loss(t, p, scale)
            + wc * brute_force_pair_loss(p, i, scale))


# ----------------------------------------------------------------------------
# Sweeps used by the command line and the acceptance suite.
# ----------------------------------------------------------------------------

def _random_triplet(rng, b, d):
    return [rng.standard_normal((b, d)) for _ in range(3)]


def oracle_sweep(bs=(2, 3, 4, 6), seeds=range(20), d: int = 8, tol: float = 1e-10):
    """Yield (variant, b, seed, abs error) for vectorized vs loop tensor loss."""
    for metric in ("cosine", "l2_mapped"):
        for strategy in ("nm", "mask"):
            cfg = LossConfig("tensor", metric, strategy)
            for b in bs:
                for seed in seeds:
                    rng = np.random.default_rng([seed, b])
                    t, i, p = _random_triplet(rng, b, d)
                    scale = float(rng.uniform(0.5, 20.0))
                    fast = cfg(t, i, p, scale).total
                    slow = brute_force_loss(t, i, p, metric, strategy, cfg.coefficients, scale)
                    yield f"{metric}/{strategy}", b, seed, abs(fast - slow)


def gradcheck_sweep(seeds=range(3), b: int = 4, d: int = 8, epsilon: float = 1e-5,
                    through_encoders: bool = True, corrupt: str | None = None):
    """Yield (variant, seed, GradCheckReport) across all four loss variants."""
    from .dataset import random_arrays
    from .encoders import EncoderSpec

    for tag in LOSS_TAGS:
        cfg = LossConfig.from_tag(tag)
        for seed in seeds:
            rng = np.random.default_rng(seed)
            if through_encoders:
                spec = EncoderSpec(text_in=6, image_in=5, dim=d, hidden=8, point_hidden=8)
                params = spec.build(seed)
                params.log_scale[...] = rng.uniform(0.0, 3.0)
                # zero biases plus tiny widths can leave a whole output dead
                for name, arr in params.arrays().items():
                    if name.endswith("bias"):
                        arr[...] = rng.normal(0.0, 0.1, size=arr.shape)
                batch = random_arrays(rng, b, spec.text_in, spec.image_in, n_points=5)
                report = check_params_grad(cfg, params, batch, epsilon, corrupt)
            else:
                t, i, p = _random_triplet(rng, b, d)
                report = check_feature_grad(cfg, t, i, p, rng.uniform(0.0, 3.0), epsilon, corrupt)
            yield tag, seed, report
