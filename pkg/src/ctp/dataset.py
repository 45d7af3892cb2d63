"""Synthetic triplet data, manifest I/O and point-cloud preprocessing.

Manifest format: JSON Lines, one record per line::

    {"id": "train-00000", "class": "car", "caption": "This is a car",
     "text_vec": [...], "image_vec": [...], "points": [[x, y, z], ...]}

Python's float repr is the shortest round-trip string, so doubles survive a
write/read cycle bit for bit.  The class prototype table is a separate JSON
object mapping class name to its noiseless text vector, in class order.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, ManifestError


CLASS_NAMES = ("car", "truck", "pedestrian", "bicycle", "bus",
               "barrier", "motorcycle", "trailer", "traffic_cone", "construction_vehicle")

MANIFEST_FIELDS = ("id", "class", "caption", "text_vec", "image_vec", "points")


@dataclass
class TripletRecord:
    id: str
    class_label: str
    caption_text: str
    text_vector: np.ndarray
    image_vector: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        self.text_vector = np.asarray(self.text_vector, dtype=np.float64)
        self.image_vector = np.asarray(self.image_vector, dtype=np.float64)
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.points.shape[0] < 1:
            raise DegenerateInputError(f"record {self.id}: point cloud is empty")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "class": self.class_label,
            "caption": self.caption_text,
            "text_vec": self.text_vector.tolist(),
            "image_vec": self.image_vector.tolist(),
            "points": self.points.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TripletRecord":
        return cls(obj["id"], obj["class"], obj["caption"],
                   obj["text_vec"], obj["image_vec"], obj["points"])

    def __eq__(self, other):
        if not isinstance(other, TripletRecord):
            return NotImplemented
        return (self.id == other.id and self.class_label == other.class_label
                and self.caption_text == other.caption_text
                and np.array_equal(self.text_vector, other.text_vector)
                and np.array_equal(self.image_vector, other.image_vector)
                and np.array_equal(self.points, other.points))


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 5
    latent_dim: int = 16
    text_dim: int = 24
    image_dim: int = 32
    sigma_text: float = 0.1
    sigma_image: float = 0.1
    sigma_point: float = 0.1
    n_centers: int = 4
    points_min: int = 16
    points_max: int = 64
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if min(self.sigma_text, self.sigma_image, self.sigma_point) < 0:
            raise ValueError("noise sigmas must be non-negative")
        if min(self.n_train, self.n_test, self.latent_dim, self.text_dim,
               self.image_dim, self.n_centers) < 1:
            raise ValueError("counts and dimensions must be >= 1")
        if not 1 <= self.points_min <= self.points_max:
            raise ValueError("need 1 <= points_min <= points_max")


def class_names(k: int) -> list:
    return [CLASS_NAMES[c] if c < len(CLASS_NAMES) else f"class_{c}" for c in range(k)]


@dataclass
class SyntheticData:
    train: list
    test: list
    prototypes: dict  # class -> noiseless text vector
    classes: list = field(default_factory=list)


def generate_synthetic(cfg: SynthConfig) -> SyntheticData:
    """Draw a class-balanced synthetic triplet dataset, fully determined by the seed.

    Every class owns a unit latent prototype.  Each modality applies its own
    fixed random linear map to the prototype and adds Gaussian noise; point
    clouds scatter points around a few prototype-derived 3-D centers.
    """
    rng = np.random.default_rng(cfg.seed)
    k = cfg.num_classes
    names = class_names(k)
    protos = rng.standard_normal((k, cfg.latent_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    maps = {
        "text": rng.standard_normal((cfg.text_dim, cfg.latent_dim)),
        "image": rng.standard_normal((cfg.image_dim, cfg.latent_dim)),
        "point": rng.standard_normal((cfg.n_centers * 3, cfg.latent_dim)) / math.sqrt(cfg.latent_dim),
    }
    clean_text = protos @ maps["text"].T
    clean_image = protos @ maps["image"].T
    centers = (protos @ maps["point"].T).reshape(k, cfg.n_centers, 3)

    def draw(n, prefix):
        labels = np.arange(n) % k
        rng.shuffle(labels)
        out = []
        for idx, c in enumerate(labels):
            m = int(rng.integers(cfg.points_min, cfg.points_max + 1))
            which = rng.integers(0, cfg.n_centers, size=m)
            pts = centers[c][which] + cfg.sigma_point * rng.standard_normal((m, 3))
            out.append(TripletRecord(
                id=f"{prefix}-{idx:05d}",
                class_label=names[c],
                caption_text=f"This is a {names[c]}",
                text_vector=clean_text[c] + cfg.sigma_text * rng.standard_normal(cfg.text_dim),
                image_vector=clean_image[c] + cfg.sigma_image * rng.standard_normal(cfg.image_dim),
                points=pts,
            ))
        return out

    train = draw(cfg.n_train, "train")
    test = draw(cfg.n_test, "test")
    table = {names[c]: clean_text[c].copy() for c in range(k)}
    return SyntheticData(train, test, table, names)


def nearest_prototype_accuracy(records, prototypes: dict) -> float:
    """Fraction of records whose raw text vector is closest to its own class prototype."""
    names = list(prototypes)
    protos = np.stack([prototypes[n] for n in names])
    x = np.stack([r.text_vector for r in records])
    d = np.linalg.norm(x[:, None, :] - protos[None], axis=2)
    pred = [names[j] for j in d.argmin(axis=1)]
    return float(np.mean([p == r.class_label for p, r in zip(pred, records)]))


def fps(points, k: int, start: int = 0) -> list:
    """Greedy farthest point sampling.

    Starts at ``start`` and repeatedly adds the point whose distance to the
    chosen set is largest; ties go to the smallest index.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"cannot sample k={k} from {n} points")
    if not 0 <= start < n:
        raise IndexError(f"start={start} out of range for {n} points")
    chosen = [start]
    mind = np.linalg.norm(pts - pts[start], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(mind))  # first maximum -> smallest index on ties
        chosen.append(nxt)
        mind = np.minimum(mind, np.linalg.norm(pts - pts[nxt], axis=1))
    return chosen


@dataclass(frozen=True)
class PointCloudSample:
    points: np.ndarray
    valid_mask: np.ndarray


def pad_or_sample(pc, n_target: int, start: int = 0) -> PointCloudSample:
    """Zero-pad a small cloud or farthest-point-sample a large one to ``n_target`` rows."""
    pc = np.asarray(pc, dtype=np.float64).reshape(-1, 3)
    m = pc.shape[0]
    if m < 1:
        raise DegenerateInputError("point cloud is empty")
    if m < n_target:
        pts = np.zeros((n_target, 3))
        pts[:m] = pc
        mask = np.zeros(n_target, dtype=bool)
        mask[:m] = True
        return PointCloudSample(pts, mask)
    if m > n_target:
        pc = pc[fps(pc, n_target, start)]
    return PointCloudSample(pc.copy(), np.ones(n_target, dtype=bool))


@dataclass
class TripletArrays:
    """Stacked, preprocessed modality inputs for a set of records."""

    text: np.ndarray
    image: np.ndarray
    points: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    classes: list

    def __len__(self):
        return self.text.shape[0]

    def take(self, idx) -> "TripletArrays":
        idx = np.asarray(idx)
        return TripletArrays(self.text[idx], self.image[idx], self.points[idx],
                             self.mask[idx], self.labels[idx], self.classes)


def stack_records(records, n_points: int | None = None, classes=None) -> TripletArrays:
    records = list(records)
    if not records:
        raise ValueError("no records to stack")
    if n_points is None:
        n_points = max(r.points.shape[0] for r in records)
    if classes is None:
        classes = sorted({r.class_label for r in records})
    index = {c: n for n, c in enumerate(classes)}
    samples = [pad_or_sample(r.points, n_points) for r in records]
    try:
        labels = np.array([index[r.class_label] for r in records], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"class {e.args[0]!r} is not in the class list") from None
    return TripletArrays(
        text=np.stack([r.text_vector for r in records]),
        image=np.stack([r.image_vector for r in records]),
        points=np.stack([s.points for s in samples]),
        mask=np.stack([s.valid_mask for s in samples]),
        labels=labels,
        classes=list(classes),
    )


def random_arrays(rng, b: int, text_dim: int, image_dim: int, n_points: int = 5) -> TripletArrays:
    """Random inputs with some padded point rows, for gradient checks."""
    mask = rng.random((b, n_points)) < 0.7
    mask[:, 0] = True
    points = rng.standard_normal((b, n_points, 3)) * mask[..., None]
    return TripletArrays(rng.standard_normal((b, text_dim)), rng.standard_normal((b, image_dim)),
                         points, mask, np.zeros(b, dtype=np.int64), ["x"])


def filter_records(records, min_points: int = 0, min_visibility: float | None = None) -> list:
    """Drop records with fewer than ``min_points`` points.

    ``min_visibility`` is accepted for manifests built from camera data; the
    synthetic records carry no visibility, so it has no effect here.
    """
    return [r for r in records if r.points.shape[0] >= min_points]


def write_manifest(records, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False))
            fh.write("\n")


def read_manifest(path) -> list:
    """Read a manifest; any malformed line aborts the read with its line number."""
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: malformed record ({e.msg})") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: record is not an object")
            missing = [f for f in MANIFEST_FIELDS if f not in obj]
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing fields {missing}")
            try:
                records.append(TripletRecord.from_json(obj))
            except (ValueError, TypeError) as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from None
    if not records:
        warnings.warn(f"manifest {path} is empty", stacklevel=2)
    return records


def write_prototypes(table: dict, path) -> None:
    Path(path).write_text(json.dumps({k: np.asarray(v).tolist() for k, v in table.items()}, indent=1)
                          + "\n", encoding="utf-8")


def read_prototypes(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: malformed prototype table ({e.msg})") from None
    if not isinstance(raw, dict) or not raw:
        raise ManifestError(f"{path}: prototype table must be a non-empty object")
    return {k: np.asarray(v, dtype=np.float64) for k, v in raw.items()}


def batch_iter(records, b: int, seed: int, drop_last: bool = False, epoch: int = 0):
    """Shuffle with a (seed, epoch) stream and yield batches of size ``b``."""
    if b < 1:
        raise ValueError("batch size must be >= 1")
    n = len(records)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, b):
        idx = order[start:start + b]
        if len(idx) < b and drop_last:
            break
        if isinstance(records, np.ndarray):
            yield records[idx]
        else:
            yield [records[j] for j in idx]
