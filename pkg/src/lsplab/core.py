"""Value types shared by every module: datasets, soft labels, seeded randomness.

Images are float arrays laid out (H, W, C) with values in [0, 1]; a dataset
stores them stacked as (N, H, W, C). Labels are length-K probability vectors
stacked as (N, K).
"""
from __future__ import annotations

import enum
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LABEL_SUM_TOL = 1e-9
_MAX_SEED = 2**64


class SplitTag(str, enum.Enum):
    BENIGN_TRAIN = "benign_train"
    POISON_SOURCE = "poison_source"
    TEST = "test"


class DatasetFormatError(ValueError):
    """Raised when an on-disk dataset is malformed."""


def check_seed(seed) -> int:
    seed = int(seed)
    if not 0 <= seed < _MAX_SEED:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def make_rng(seed, *stream) -> np.random.Generator:
    """Independent generator for ``(seed, *stream)``; streams are non-negative ints."""
    return np.random.default_rng(np.random.SeedSequence([check_seed(seed), *map(int, stream)]))


def derive_seed(seed, *stream) -> int:
    ss = np.random.SeedSequence([check_seed(seed), *map(int, stream)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def check_image(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3 or min(x.shape) <= 0:
        raise ValueError(f"image must have shape (H, W, C) with positive dims, got {x.shape}")
    return x


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("label index out of range")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def check_soft_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2:
        raise ValueError("labels must be (N, K)")
    if np.any(labels < 0):
        raise ValueError("soft labels must be nonnegative")
    if labels.shape[0] and np.max(np.abs(labels.sum(axis=1) - 1.0)) > LABEL_SUM_TOL:
        raise ValueError("soft labels must sum to 1")
    return labels


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split_tag: SplitTag = SplitTag.BENIGN_TRAIN
    seed: int | None = None
    # Index of each sample in the dataset it was split from; used to prove partitions.
    origin: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float32)
        labels = check_soft_labels(np.array(self.labels, dtype=np.float64))
        if images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got {images.shape}")
        if images.shape[0] != labels.shape[0]:
            raise ValueError("image and label counts differ")
        if labels.shape[1] != self.num_classes:
            raise ValueError("label length does not match num_classes")
        if images.shape[0] and min(images.shape[1:]) <= 0:
            raise ValueError("image dims must be positive")
        origin = np.arange(len(images)) if self.origin is None else np.array(self.origin, dtype=np.int64)
        object.__setattr__(self, "images", _freeze(images))
        object.__setattr__(self, "labels", _freeze(labels))
        object.__setattr__(self, "origin", _freeze(origin))
        object.__setattr__(self, "split_tag", SplitTag(self.split_tag))

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i):
        return self.images[i], self.labels[i]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def hard_labels(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)

    def subset(self, indices, split_tag=None) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices], self.num_classes,
                              split_tag or self.split_tag, self.seed, self.origin[indices])

    def with_tag(self, split_tag) -> "LabeledDataset":
        return LabeledDataset(self.images, self.labels, self.num_classes, split_tag, self.seed, self.origin)

    @staticmethod
    def concat(parts, split_tag=SplitTag.BENIGN_TRAIN) -> "LabeledDataset":
        parts = list(parts)
        return LabeledDataset(np.concatenate([p.images for p in parts]),
                              np.concatenate([p.labels for p in parts]),
                              parts[0].num_classes, split_tag, parts[0].seed,
                              np.concatenate([p.origin for p in parts]))


def _stratified_quota(counts: np.ndarray, total: int, rng: np.random.Generator) -> np.ndarray:
    """Per-class take counts summing to ``total``, each within 1 of its exact share."""
    exact = counts * (total / counts.sum())
    quota = np.floor(exact).astype(np.int64)
    short = total - quota.sum()
    if short:
        # largest remainders first, random tie-break
        order = np.lexsort((rng.random(len(counts)), -(exact - quota)))
        quota[order[:short]] += 1
    return quota


def split_for_poisoning(dataset: LabeledDataset, poison_fraction: float, seed) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified partition into (benign_train, poison_source).

    The poison share has exactly ``floor(len(dataset) * poison_fraction)`` samples.
    """
    if not 0.0 <= poison_fraction < 1.0:
        raise ValueError(f"poison_fraction must be in [0, 1), got {poison_fraction}")
    if len(dataset) == 0:
        raise ValueError("cannot split an empty dataset")
    rng = make_rng(seed, 1)
    n_poison = int(np.floor(len(dataset) * poison_fraction))
    hard = dataset.hard_labels
    classes = np.unique(hard)
    members = [np.flatnonzero(hard == c) for c in classes]
    quota = _stratified_quota(np.array([len(m) for m in members]), n_poison, rng)
    poison_idx = []
    for m, q in zip(members, quota):
        poison_idx.append(rng.permutation(m)[:q])
    poison_idx = np.sort(np.concatenate(poison_idx)) if poison_idx else np.zeros(0, np.int64)
    keep = np.ones(len(dataset), bool)
    keep[poison_idx] = False
    return (dataset.subset(np.flatnonzero(keep), SplitTag.BENIGN_TRAIN),
            dataset.subset(poison_idx, SplitTag.POISON_SOURCE))


# ---------------------------------------------------------------------------
# Synthetic data

_PALETTE = np.array([
    [0.95, 0.25, 0.20], [0.20, 0.80, 0.30], [0.25, 0.35, 0.95], [0.95, 0.85, 0.20],
    [0.85, 0.30, 0.90], [0.20, 0.85, 0.90], [0.95, 0.55, 0.15], [0.60, 0.95, 0.40],
    [0.55, 0.45, 0.85], [0.90, 0.90, 0.90],
])


def _motif(shape_id: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Soft [0,1] coverage of one of ten base shapes in normalized coordinates."""
    def soft(d):  # d < 0 inside
        return np.clip(0.5 - d * 6.0, 0.0, 1.0)

    r = np.hypot(u, v)
    au, av = np.abs(u), np.abs(v)
    box = np.maximum(au, av)
    if shape_id == 0:      # disk
        return soft(r - 0.55)
    if shape_id == 1:      # ring
        return soft(np.abs(r - 0.52) - 0.12)
    if shape_id == 2:      # filled square
        return soft(box - 0.5)
    if shape_id == 3:      # square outline
        return soft(np.abs(box - 0.52) - 0.11)
    if shape_id == 4:      # plus
        return soft(np.maximum(np.minimum(au, av) - 0.15, box - 0.7))
    if shape_id == 5:      # diagonal cross
        d = np.minimum(np.abs(u - v), np.abs(u + v)) / np.sqrt(2)
        return soft(np.maximum(d - 0.12, box - 0.6))
    if shape_id == 6:      # horizontal bars
        return soft(np.maximum(np.abs(((v + 0.6) % 0.5) - 0.25) - 0.1, np.maximum(au - 0.65, av - 0.65)))
    if shape_id == 7:      # vertical bars
        return soft(np.maximum(np.abs(((u + 0.6) % 0.5) - 0.25) - 0.1, np.maximum(au - 0.65, av - 0.65)))
    if shape_id == 8:      # triangle, apex up
        return soft(np.maximum(v - 0.55, au - (v + 0.55) * 0.6))
    # two-blob dumbbell
    return soft(np.minimum(np.hypot(u + 0.35, v + 0.35), np.hypot(u - 0.35, v - 0.35)) - 0.3)


def generate_synthetic_dataset(num_classes: int, per_class: int, height: int, width: int, seed,
                               channels: int = 1, noise: float = 0.08) -> LabeledDataset:
    """Procedural K-class image set: one jittered shape motif per class plus clutter and noise."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if height < 4 or width < 4 or channels not in (1, 3):
        raise ValueError("need height, width >= 4 and channels in {1, 3}")
    rng = make_rng(seed, 0)
    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    yy, xx = np.meshgrid(np.linspace(-1, 1, height), np.linspace(-1, 1, width), indexing="ij")
    images = np.empty((n, height, width, channels), dtype=np.float32)
    for i, c in enumerate(labels):
        base, variant = c % 10, c // 10
        angle = rng.uniform(-0.2, 0.2) + variant * np.pi / 4
        scale = rng.uniform(0.85, 1.15) * (1.0 - 0.08 * variant)
        ty, tx = rng.uniform(-0.12, 0.12, size=2)
        ca, sa = np.cos(angle), np.sin(angle)
        u = (ca * (xx - tx) + sa * (yy - ty)) / (0.72 * scale)
        v = (-sa * (xx - tx) + ca * (yy - ty)) / (0.72 * scale)
        cover = _motif(base, u, v)
        # clutter: one faint blob of random position
        by, bx = rng.uniform(-0.6, 0.6, size=2)
        cover = np.maximum(cover, 0.35 * np.clip(1.0 - np.hypot(xx - bx, yy - by) / 0.25, 0.0, 1.0))
        if channels == 1:
            fg = np.array([rng.uniform(0.6, 1.0)])
        else:
            fg = np.clip(_PALETTE[c % len(_PALETTE)] + rng.normal(0, 0.08, 3), 0.05, 1.0)
        bg = rng.uniform(0.0, 0.12, size=channels)
        img = bg + cover[..., None] * (fg - bg)
        img += rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    order = rng.permutation(n)
    return LabeledDataset(images[order], one_hot(labels[order], num_classes), num_classes,
                          SplitTag.BENIGN_TRAIN, check_seed(seed))


# ---------------------------------------------------------------------------
# IDX ingestion

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _read_idx_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        import gzip
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def load_idx_dataset(images_path, labels_path, num_classes: int | None = None,
                     split_tag=SplitTag.BENIGN_TRAIN) -> LabeledDataset:
    """Read an MNIST-layout IDX image/label pair (optionally gzipped)."""
    raw = _read_idx_bytes(images_path)
    if len(raw) < 16:
        raise DatasetFormatError("images header: truncated file")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != _IDX_IMAGES_MAGIC:
        raise DatasetFormatError(f"images magic: expected 0x{_IDX_IMAGES_MAGIC:08x}, got 0x{magic:08x}")
    expected = 16 + count * rows * cols
    if len(raw) < expected:
        raise DatasetFormatError(f"images data: truncated, expected {expected} bytes, got {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)

    lraw = _read_idx_bytes(labels_path)
    if len(lraw) < 8:
        raise DatasetFormatError("labels header: truncated file")
    lmagic, lcount = struct.unpack(">II", lraw[:8])
    if lmagic != _IDX_LABELS_MAGIC:
        raise DatasetFormatError(f"labels magic: expected 0x{_IDX_LABELS_MAGIC:08x}, got 0x{lmagic:08x}")
    if len(lraw) < 8 + lcount:
        raise DatasetFormatError(f"labels data: truncated, expected {8 + lcount} bytes, got {len(lraw)}")
    if lcount != count:
        raise DatasetFormatError(f"labels count: {lcount} labels for {count} images")
    labels = np.frombuffer(lraw, dtype=np.uint8, count=lcount, offset=8).astype(np.int64)
    k = int(num_classes or (labels.max() + 1 if lcount else 10))
    images = (pixels.reshape(count, rows, cols, 1).astype(np.float32) / np.float32(255.0))
    return LabeledDataset(images, one_hot(labels, k), k, split_tag)


def write_idx_dataset(dataset: LabeledDataset, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx_dataset` for single-channel datasets."""
    n, h, w, c = dataset.images.shape
    if c != 1:
        raise ValueError("IDX images are single channel")
    pixels = np.rint(np.asarray(dataset.images[..., 0]) * 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", _IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", _IDX_LABELS_MAGIC, n)
                                  + dataset.hard_labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Directory persistence: raw little-endian arrays + JSON manifest

def save_dataset(dataset: LabeledDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dataset.images.astype("<f4").tofile(directory / "images.f32")
    # float32 cannot hold a soft label to 1e-9; labels go out as float64
    dataset.labels.astype("<f8").tofile(directory / "labels.f64")
    dataset.origin.astype("<i8").tofile(directory / "origin.i64")
    manifest = {
        "count": len(dataset),
        "dims": list(dataset.image_shape),
        "num_classes": dataset.num_classes,
        "split_tag": dataset.split_tag.value,
        "seed": dataset.seed,
        "images": {"file": "images.f32", "dtype": "<f4"},
        "labels": {"file": "labels.f64", "dtype": "<f8"},
    }
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2))
    os.replace(tmp, directory / "manifest.json")
    return directory


def load_dataset(directory) -> LabeledDataset:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise DatasetFormatError(f"manifest: missing in {directory}") from e
    n = manifest["count"]
    h, w, c = manifest["dims"]
    k = manifest["num_classes"]
    images = np.fromfile(directory / manifest["images"]["file"], dtype=manifest["images"]["dtype"])
    labels = np.fromfile(directory / manifest["labels"]["file"], dtype=manifest["labels"]["dtype"])
    if images.size != n * h * w * c:
        raise DatasetFormatError(f"images: expected {n * h * w * c} values, got {images.size}")
    if labels.size != n * k:
        raise DatasetFormatError(f"labels: expected {n * k} values, got {labels.size}")
    origin_path = directory / "origin.i64"
    origin = np.fromfile(origin_path, dtype="<i8") if origin_path.exists() else None
    return LabeledDataset(images.reshape(n, h, w, c), labels.reshape(n, k), k,
                          manifest["split_tag"], manifest["seed"], origin)
