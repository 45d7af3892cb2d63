"""AdamW training loop with linear warmup, checkpoints and per-epoch logs."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .dataset import TripletArrays, batch_iter, stack_records
from .diff import loss_and_grad_params
from .encoders import EncoderParams, EncoderSpec, MlpParams, SetEncoderParams
from .errors import ManifestError, NonFiniteLossError
from .losses import MAX_LOGIT_SCALE, LOSS_TAGS, LossConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ENCODER_NAMES = ("text", "image", "point")
NO_DECAY = ("log_scale",)


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "ctp_mask"
    coefficients: tuple | None = None
    lr: float = 1e-3
    weight_decay: float = 0.0
    warmup_ratio: float = 0.1
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    freeze: tuple = ()
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = None
    reduction: str = "sum"
    dim: int = 32
    hidden: int = 64
    point_hidden: int = 64
    n_points: int = 32

    def __post_init__(self):
        if self.loss not in LOSS_TAGS:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSS_TAGS}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.warmup_ratio <= 1:
            raise ValueError("warmup_ratio must lie in [0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for a contrastive signal")
        if self.epochs < 0 or self.weight_decay < 0:
            raise ValueError("epochs and weight_decay must be non-negative")
        bad = set(self.freeze) - set(ENCODER_NAMES)
        if bad:
            raise ValueError(f"cannot freeze unknown encoder(s) {sorted(bad)}")
        object.__setattr__(self, "freeze", tuple(sorted(self.freeze)))
        if self.coefficients is not None:
            object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        self.loss_config()

    def loss_config(self) -> LossConfig:
        return LossConfig.from_tag(self.loss, self.coefficients, self.reduction)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freeze"] = list(self.freeze)
        d["betas"] = list(self.betas)
        if self.coefficients is not None:
            d["coefficients"] = list(self.coefficients)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys {sorted(unknown)}")
        d = dict(d)
        for key in ("freeze", "betas", "coefficients"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


# Hyperparameters reported for CLIP-scale backbones.  Too much weight decay
# for the toy encoders, hence not the default.
REFERENCE_PROFILE = dict(lr=5e-4, weight_decay=0.2, warmup_ratio=0.1, batch_size=192, epochs=20)


def reference_profile(**overrides) -> TrainConfig:
    return TrainConfig(**{**REFERENCE_PROFILE, **overrides})


def lr_at(step: int, total_steps: int, warmup_ratio: float, base_lr: float) -> float:
    """Linear ramp from 0 over ceil(warmup_ratio * total) steps, then constant."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    warm = math.ceil(warmup_ratio * total_steps)
    if warm == 0 or step >= warm:
        return base_lr
    return base_lr * step / warm


def init_adam_state(arrays: dict) -> dict:
    return {
        "step": 0,
        "m": {k: np.zeros_like(v) for k, v in arrays.items()},
        "v": {k: np.zeros_like(v) for k, v in arrays.items()},
    }


def adamw_step(params: dict, grads: dict, state: dict, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
               no_decay=NO_DECAY) -> dict:
    """One in-place AdamW update of every parameter that has a gradient.

    Weight decay is decoupled: ``p -= lr * wd * p`` is applied separately
    from the bias-corrected adaptive step, and never to ``no_decay`` names.
    """
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if weight_decay and name not in no_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= factor
    return total


@dataclass
class Checkpoint:
    params: EncoderParams
    optimizer: dict
    config: dict
    classes: list
    step: int = 0
    version: int = CHECKPOINT_VERSION

    @property
    def logit_scale(self) -> float:
        return float(min(math.exp(float(self.params.log_scale)), MAX_LOGIT_SCALE))

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def to_json(self) -> dict:
        def pack(arrays):
            return {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in arrays.items()}

        return {
            "version": self.version,
            "step": self.step,
            "config": self.config,
            "classes": list(self.classes),
            "architecture": self.params.architecture(),
            "params": pack(self.params.arrays()),
            "optimizer": {"step": self.optimizer["step"],
                          "m": pack(self.optimizer["m"]),
                          "v": pack(self.optimizer["v"])},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":")) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def from_json(cls, obj: dict) -> "Checkpoint":
        if obj.get("version") != CHECKPOINT_VERSION:
            raise ManifestError(f"unsupported checkpoint version {obj.get('version')!r}")

        def unpack(d):
            return {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()}

        arrays = unpack(obj["params"])
        template = _template(obj["architecture"])
        params = template.with_arrays(arrays)
        opt = obj["optimizer"]
        optimizer = {"step": int(opt["step"]), "m": unpack(opt["m"]), "v": unpack(opt["v"])}
        return cls(params, optimizer, obj["config"], list(obj["classes"]), int(obj["step"]),
                   int(obj["version"]))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}: malformed checkpoint ({e.msg})") from None
        return cls.from_json(obj)


def _template(arch: dict) -> EncoderParams:
    def mlp(sizes, out_activation=False):
        layers = [(np.zeros((o, i)), np.zeros(o)) for i, o in zip(sizes[:-1], sizes[1:])]
        return MlpParams(layers, out_activation=out_activation)

    return EncoderParams(mlp(arch["text"]), mlp(arch["image"]),
                         SetEncoderParams(mlp(arch["point_local"], True), mlp(arch["point_head"])))


def build_encoders(cfg: TrainConfig, arrays: TripletArrays) -> EncoderParams:
    spec = EncoderSpec(text_in=arrays.text.shape[1], image_in=arrays.image.shape[1],
                       dim=cfg.dim, hidden=cfg.hidden, point_hidden=cfg.point_hidden)
    return spec.build(cfg.seed)


def train(cfg: TrainConfig, records, classes=None):
    """Train all non-frozen encoders and the logit scale; return (Checkpoint, log).

    ``records`` is a list of TripletRecords or an already stacked
    TripletArrays.  The log has one dict per epoch with the mean batch
    loss, the logit scale and the learning rate at the epoch's last step.
    """
    if isinstance(records, TripletArrays):
        data = records
    else:
        data = stack_records(records, cfg.n_points, classes)
    n = len(data)
    if n < cfg.batch_size:
        raise ValueError(f"{n} records cannot fill a batch of {cfg.batch_size}")
    loss_cfg = cfg.loss_config()
    params = build_encoders(cfg, data)
    arrays = params.arrays()
    state = init_adam_state(arrays)
    batches_per_epoch = n // cfg.batch_size
    total = max(cfg.epochs * batches_per_epoch, 1)
    max_log = math.log(MAX_LOGIT_SCALE)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        lr = cfg.lr
        for bno, idx in enumerate(batch_iter(np.arange(n), cfg.batch_size, cfg.seed,
                                             drop_last=True, epoch=epoch)):
            batch = data.take(idx)
            loss, grads = loss_and_grad_params(loss_cfg, params, batch, frozen=cfg.freeze)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NonFiniteLossError(
                    f"non-finite loss {loss} at epoch {epoch}, batch {bno}, step {step}")
            if cfg.grad_clip is not None:
                clip_grad_norm(grads, cfg.grad_clip)
            lr = lr_at(step, total, cfg.warmup_ratio, cfg.lr)
            adamw_step(arrays, grads, state, lr, cfg.betas, cfg.eps, cfg.weight_decay)
            if params.log_scale > max_log:
                params.log_scale[...] = max_log
            losses.append(loss)
            step += 1
        entry = {"epoch": epoch, "mean_loss": float(np.mean(losses)),
                 "logit_scale": float(math.exp(float(params.log_scale))), "lr": lr}
        history.append(entry)
        log.debug("epoch %d loss %.6f scale %.3f", epoch, entry["mean_loss"], entry["logit_scale"])
    ckpt = Checkpoint(params, state, cfg.to_dict(), list(data.classes), step)
    return ckpt, history


def write_log(history, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for entry in history:
            fh.write(json.dumps(entry) + "\n")


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
