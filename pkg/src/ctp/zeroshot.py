"""Zero-shot classification with trained encoders.

Class prompts are encoded by the text encoder.  An (image, point) pair is
scored against every class text with the mapped L2 tensor similarity and
assigned the best class; single-modality modes use cosine similarity.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import stack_records
from .encoders import encode_raw, mlp_forward
from .errors import ShapeError
from .similarity import l_max, normalize_rows

MODES = ("T_I", "T_P", "T_IP")
MODE_TITLES = {"T_I": "T-I", "T_P": "T-P", "T_IP": "T-(I,P)"}


def build_class_texts(classes, prototypes: dict) -> np.ndarray:
    """Stack the prompt vectors for ``classes`` in order (one row per class)."""
    classes = list(classes)
    if not classes:
        raise ValueError("need at least one class")
    if len(set(classes)) != len(classes):
        raise ValueError("duplicate class names")
    missing = [c for c in classes if c not in prototypes]
    if missing:
        raise KeyError(f"unknown class(es) {missing}")
    return np.stack([np.asarray(prototypes[c], dtype=np.float64) for c in classes])


def pair_scores(text_feats, img, pc) -> np.ndarray:
    """Mapped L2 similarity of every class text with each (image, point) pair.

    ``img`` and ``pc`` are a single vector each or n x d batches; the result
    is m scores or an n x m array.
    """
    t = np.asarray(text_feats, dtype=np.float64)
    i = np.atleast_2d(np.asarray(img, dtype=np.float64))
    p = np.atleast_2d(np.asarray(pc, dtype=np.float64))
    if t.ndim != 2 or t.shape[0] == 0:
        raise ValueError("need at least one class text feature")
    if not (t.shape[1] == i.shape[1] == p.shape[1]) or i.shape != p.shape:
        raise ShapeError("feature dimensions disagree")
    d_ti = np.linalg.norm(i[:, None, :] - t[None], axis=2)
    d_tp = np.linalg.norm(p[:, None, :] - t[None], axis=2)
    d_ip = np.linalg.norm(i - p, axis=1)[:, None]
    s = 1.0 - (d_ti + d_tp + d_ip) / l_max(3)
    return s[0] if np.ndim(img) == 1 else s


def classify_pair(text_feats, img_feat, pc_feat):
    """Return (class index, scores); ties go to the smallest index."""
    scores = pair_scores(text_feats, img_feat, pc_feat)
    return int(np.argmax(scores)), scores


def classify_single(text_feats, feat) -> int:
    t = np.asarray(text_feats, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] == 0:
        raise ValueError("need at least one class text feature")
    f = np.asarray(feat, dtype=np.float64)
    if f.shape[-1] != t.shape[1]:
        raise ShapeError("feature dimensions disagree")
    return int(np.argmax(t @ f))


@dataclass
class EvalReport:
    mode: str
    classes: list
    confusion: np.ndarray  # rows: true class, columns: predicted class
    avg_accuracy: float = 0.0
    macro_accuracy: float = 0.0
    per_class_accuracy: dict = field(default_factory=dict)
    n_samples: int = 0

    @classmethod
    def from_predictions(cls, mode: str, classes, labels, preds) -> "EvalReport":
        m = len(classes)
        conf = np.zeros((m, m), dtype=np.int64)
        np.add.at(conf, (np.asarray(labels), np.asarray(preds)), 1)
        n = int(conf.sum())
        correct = int(np.trace(conf))
        counts = conf.sum(axis=1)
        per = {c: 100.0 * conf[k, k] / counts[k] for k, c in enumerate(classes) if counts[k]}
        macro = float(np.mean(list(per.values()))) if per else 0.0
        return cls(mode, list(classes), conf, 100.0 * correct / n if n else 0.0, macro, per, n)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "avg_accuracy": self.avg_accuracy,
            "macro_accuracy": self.macro_accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "confusion": self.confusion.tolist(),
            "classes": self.classes,
            "n_samples": self.n_samples,
        }


def class_text_features(params, prototypes: dict, classes) -> np.ndarray:
    return normalize_rows(mlp_forward(params.text, build_class_texts(classes, prototypes)))


def evaluate(checkpoint, records, prototypes: dict, mode: str = "T_IP") -> EvalReport:
    """Zero-shot accuracy of a checkpoint on ``records`` in one mode."""
    return evaluate_modes(checkpoint, records, prototypes, (mode,))[mode]


def evaluate_modes(checkpoint, records, prototypes: dict, modes=MODES) -> dict:
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    classes = list(prototypes)
    absent = sorted({r.class_label for r in records} - set(classes))
    if absent:
        raise KeyError(f"class(es) {absent} absent from the prototype table")
    params = checkpoint.params
    arr = stack_records(records, checkpoint.config.get("n_points"), classes)
    arch = params.architecture()
    if arr.text.shape[1] != arch["text"][0] or arr.image.shape[1] != arch["image"][0]:
        raise ShapeError("checkpoint encoders do not match the manifest's raw dimensions")
    t, i, p = (normalize_rows(x) for x in encode_raw(params, arr.text, arr.image, arr.points, arr.mask))
    feats_t = class_text_features(params, prototypes, classes)
    return reports_from_features(feats_t, i, p, arr.labels, classes, modes)


def reports_from_features(text_feats, img, pc, labels, classes, modes=MODES) -> dict:
    """Classify already encoded, unit-norm image and point features in each mode."""
    out = {}
    for mode in modes:
        if mode == "T_IP":
            preds = np.argmax(pair_scores(text_feats, img, pc), axis=1)
        else:
            f = img if mode == "T_I" else pc
            preds = np.argmax(f @ text_feats.T, axis=1)
        out[mode] = EvalReport.from_predictions(mode, classes, labels, preds)
    return out


def format_table(reports, title: str | None = None) -> str:
    """Fixed-width table: one row per class plus the average, one column per mode."""
    reports = list(reports)
    if not reports:
        return ""
    classes = reports[0].classes
    width = max(12, *(len(c) + 2 for c in classes))
    head = f"{'Class':<{width}}" + "".join(f"{MODE_TITLES[r.mode]:>10}" for r in reports)
    lines = [title] if title else []
    lines += [head, "-" * len(head)]
    for c in classes:
        row = f"{c:<{width}}"
        for r in reports:
            v = r.per_class_accuracy.get(c)
            row += f"{'-' if v is None else f'{v:.2f}':>10}"
        lines.append(row)
    lines.append("-" * len(head))
    lines.append(f"{'Avg.':<{width}}" + "".join(f"{r.avg_accuracy:>10.2f}" for r in reports))
    lines.append(f"{'Macro':<{width}}" + "".join(f"{r.macro_accuracy:>10.2f}" for r in reports))
    return "\n".join(lines)


def write_reports(reports, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_dict()) + "\n")
