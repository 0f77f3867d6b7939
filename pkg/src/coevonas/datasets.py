"""Image-classification datasets: IDX and CSV loaders, splits, and a synthetic fixture."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass
class Dataset:
    samples: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_count: int

    def __post_init__(self):
        if len(self.samples) != len(self.labels):
            raise DatasetError("size-mismatch", f"{len(self.samples)} samples but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetError("bad-label", f"labels outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.samples.shape[1:])

    def subset(self, index) -> "Dataset":
        return Dataset(self.samples[index], self.labels[index], self.class_count)


@dataclass(frozen=True)
class SplitSpec:
    train_count: int
    validation_count: int
    seed: int = 0


def _read_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 4 * ndim:
        raise DatasetError("truncated", f"{path}: header too short")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DatasetError("bad-magic", f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    expected = int(np.prod(dims))
    if len(body) < expected:
        raise DatasetError("truncated", f"{path}: {len(body)} data bytes, header promises {expected}")
    if len(body) > expected:
        raise DatasetError("dim-mismatch", f"{path}: {len(body) - expected} trailing bytes")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, class_count: int | None = None) -> Dataset:
    """Big-endian IDX image/label pair, pixels scaled by 1/255."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise DatasetError("dim-mismatch", f"{len(images)} images but {len(labels)} labels")
    labels = labels.astype(np.int64)
    classes = class_count or (int(labels.max()) + 1 if len(labels) else 0)
    samples = (images.astype(np.float32) / np.float32(255.0))[..., None]
    return Dataset(samples, labels, classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (N, H, W) and labels (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_csv(path, width: int, height: int, channels: int = 1, class_count: int | None = None) -> Dataset:
    """Rows of ``label, v_0 .. v_{H*W*C-1}`` with 0..255 values in HWC order."""
    expected = width * height * channels + 1
    labels, rows = [], []
    with open(path, newline="") as fh:
        for index, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            if len(row) != expected:
                raise DatasetError("ragged-row", f"row {index} has {len(row)} fields, expected {expected}")
            labels.append(int(row[0]))
            rows.append([float(v) for v in row[1:]])
    pixels = np.asarray(rows, dtype=np.float32).reshape(-1, height, width, channels)
    labels = np.asarray(labels, dtype=np.int64)
    classes = class_count or (int(labels.max()) + 1 if len(labels) else 0)
    return Dataset(pixels / np.float32(255.0), labels, classes)


def write_csv(dataset: Dataset, path) -> None:
    pixels = np.rint(dataset.samples * 255.0).astype(np.int64).reshape(len(dataset), -1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for label, row in zip(dataset.labels, pixels):
            writer.writerow([int(label), *row.tolist()])


def subsample_split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Uniform draw without replacement into disjoint train/validation sets."""
    n = len(dataset)
    if spec.train_count < 0 or spec.validation_count < 0 or spec.train_count + spec.validation_count > n:
        raise DatasetError("split-too-large", f"{spec.train_count}+{spec.validation_count} > {n} samples")
    order = np.random.default_rng(spec.seed).permutation(n)
    train_idx = order[:spec.train_count]
    val_idx = order[spec.train_count:spec.train_count + spec.validation_count]
    train, val = dataset.subset(train_idx), dataset.subset(val_idx)
    _log_balance(dataset, train, "train")
    _log_balance(dataset, val, "validation")
    return train, val


def class_drift(parent: Dataset, part: Dataset) -> float:
    """Largest per-class share difference (fraction) between a split and its parent."""
    if not len(part):
        return 0.0
    p = np.bincount(parent.labels, minlength=parent.class_count) / len(parent)
    q = np.bincount(part.labels, minlength=parent.class_count) / len(part)
    return float(np.abs(p - q).max())


def _log_balance(parent, part, name):
    drift = class_drift(parent, part)
    if drift > 0.05:
        log.warning("%s split class balance drifts %.1f pp from the full set", name, 100 * drift)


# 5x7 glyphs, one string per row, '#' = ink
GLYPHS = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "..##.", ".#...", "#....", "#####"],
    [".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
]


def synthetic_glyphs(count: int = 3000, seed: int = 0, size: int = 8, noise: float = 0.1,
                     erase: float = 0.1) -> Dataset:
    """Procedural digit-like 8x8 images for ten classes.

    Each sample is a 5x7 glyph at a random offset with random ink intensity,
    a fraction of ink pixels erased, a few spurious ink pixels, and additive
    gaussian noise; values are clipped to [0, 1].
    """
    rng = np.random.default_rng(seed)
    templates = np.array([[[c == "#" for c in row] for row in g] for g in GLYPHS], dtype=np.float32)
    labels = rng.integers(0, len(GLYPHS), count)
    images = np.zeros((count, size, size), dtype=np.float32)
    for i, label in enumerate(labels):
        glyph = templates[label] * rng.uniform(0.5, 1.0)
        glyph = glyph * (rng.random(glyph.shape) >= erase)
        dy = rng.integers(0, size - 7 + 1)
        dx = rng.integers(0, size - 5 + 1)
        images[i, dy:dy + 7, dx:dx + 5] = glyph
        speckle = rng.random((size, size)) < 0.05
        images[i][speckle] = rng.uniform(0.5, 1.0, speckle.sum())
    images += rng.normal(0.0, noise, images.shape).astype(np.float32)
    images = np.clip(images, 0.0, 1.0)
    # quantise to 8-bit so CSV/IDX round trips are exact
    images = np.rint(images * 255.0) / np.float32(255.0)
    return Dataset(images[..., None].astype(np.float32), labels.astype(np.int64), len(GLYPHS))
