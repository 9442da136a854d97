"""
Deterministic synthetic image tasks and the MEATDAT1 dataset container.

Generated pixels are quantised to multiples of 1/255 so a dataset survives a
write/read through the uint8 container unchanged.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Tuple

import numpy as np

from .errors import ConfigError, FormatError

DATA_MAGIC = b"MEATDAT1"
# magic | u32 N | u32 C | u32 H | u32 W | u32 num_classes
_HEADER = struct.Struct("<8s5I")
HEADER_BYTES = _HEADER.size
_HEADER_FIELDS = ("magic", "count", "channels", "height", "width", "num_classes")

KINDS = ("bars", "blobs", "grid", "rings")

# named two-colour palettes: (background, foreground), RGB in [0, 1]
PALETTES = {
    "gray": ((0.15, 0.15, 0.15), (0.9, 0.9, 0.9)),
    "warm": ((0.55, 0.2, 0.05), (1.0, 0.85, 0.3)),
    "cool": ((0.05, 0.15, 0.5), (0.3, 0.9, 1.0)),
    "forest": ((0.05, 0.35, 0.1), (0.75, 1.0, 0.4)),
    "dusk": ((0.4, 0.05, 0.45), (1.0, 0.5, 0.8)),
    "inverted": ((0.9, 0.9, 0.9), (0.1, 0.1, 0.1)),
}


@dataclass
class Dataset:
    images: np.ndarray          # [N, C, H, W] float64
    labels: np.ndarray          # [N] int64
    num_classes: int
    split: str = "train"
    provenance: str = ""
    normalized: bool = False

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ConfigError(f"images {self.images.shape} / labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def channel_stats(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.images.mean(axis=(0, 2, 3)), self.images.std(axis=(0, 2, 3))

    def normalize(self, mean: np.ndarray, std: np.ndarray) -> "Dataset":
        """Per-channel standardisation; a dataset already normalised is returned as is."""
        if self.normalized:
            return self
        mean = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
        std = np.maximum(np.asarray(std, dtype=np.float64), 1e-8).reshape(1, -1, 1, 1)
        return replace(self, images=(self.images - mean) / std, normalized=True)


@dataclass(frozen=True)
class TaskFamily:
    """Parameters of a synthetic task generator.

    kind     bars (class = bar orientation), blobs (class = blob position),
             grid (class = fixed on/off patch code), rings (class = ring radius
             and count)
    palette  name from PALETTES; sets background/foreground colours
    rotation offset in degrees applied to orientation-like features
    noise    std of additive Gaussian pixel noise
    """

    kind: str = "bars"
    num_classes: int = 10
    palette: str = "gray"
    rotation: float = 0.0
    noise: float = 0.05
    seed: int = 0
    image_size: int = 32
    channels: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; expected one of {KINDS}",
                              key="tasks[].kind")
        if self.palette not in PALETTES:
            raise ConfigError(f"unknown palette {self.palette!r}", key="tasks[].palette")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2", key="tasks[].num_classes")
        if self.channels != 3:
            raise ConfigError("synthetic families generate RGB images", key="model.channels")

    def describe(self) -> str:
        return (f"{self.kind}:C={self.num_classes}:palette={self.palette}:rot={self.rotation}"
                f":noise={self.noise}:seed={self.seed}:size={self.image_size}")


def _coords(size: int) -> Tuple[np.ndarray, np.ndarray]:
    r = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    return np.meshgrid(r, r, indexing="ij")


def _shape_map(family: TaskFamily, label: int, rng: np.random.Generator) -> np.ndarray:
    """Foreground intensity in [0, 1] of one example of class ``label``."""
    size, c = family.image_size, family.num_classes
    yy, xx = _coords(size)
    if family.kind == "bars":
        theta = np.deg2rad(family.rotation) + np.pi * label / c + rng.normal(0, 0.03)
        offset = rng.uniform(-0.3, 0.3)
        dist = np.abs(np.cos(theta) * yy - np.sin(theta) * xx - offset)
        return (dist < 0.14).astype(np.float64)
    if family.kind == "blobs":
        angle = np.deg2rad(family.rotation) + 2 * np.pi * label / c
        cy, cx = 0.55 * np.sin(angle), 0.55 * np.cos(angle)
        cy += rng.normal(0, 0.05)
        cx += rng.normal(0, 0.05)
        return (((yy - cy) ** 2 + (xx - cx) ** 2) < 0.09).astype(np.float64)
    if family.kind == "grid":
        cells = 4
        code = np.random.default_rng([family.seed, 7919, label]).random((cells, cells)) < 0.5
        flip = rng.random((cells, cells)) < 0.08
        pattern = np.logical_xor(code, flip).astype(np.float64)
        return np.kron(pattern, np.ones((size // cells, size // cells)))
    # rings: radius picked by label, centre jittered
    radius = 0.2 + 0.65 * label / max(c - 1, 1)
    cy, cx = rng.normal(0, 0.06, size=2)
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return (np.abs(r - radius) < 0.09).astype(np.float64)


def generate_task(family: TaskFamily, n_train: int, n_test: int) -> Tuple[Dataset, Dataset]:
    """Class-balanced train/test pair; a pure function of ``family``."""
    if n_train <= 0 or n_test <= 0:
        raise ConfigError("n_train and n_test must be positive", key="tasks[].n_train")
    c = family.num_classes
    for name, count in (("n_train", n_train), ("n_test", n_test)):
        if count % c:
            raise ConfigError(f"{name}={count} cannot be split evenly over {c} classes",
                              key=f"tasks[].{name}")
    bg, fg = (np.asarray(v).reshape(3, 1, 1) for v in PALETTES[family.palette])
    out = []
    for split, count, stream in (("train", n_train, 0), ("test", n_test, 1)):
        # separate streams keep train and test disjoint draws of the generator
        rng = np.random.default_rng([family.seed, stream])
        labels = np.repeat(np.arange(c), count // c)
        rng.shuffle(labels)
        images = np.empty((count, 3, family.image_size, family.image_size))
        for i, label in enumerate(labels):
            shape = _shape_map(family, int(label), rng)
            img = bg * (1.0 - shape) + fg * shape
            img = img + rng.normal(0.0, family.noise, size=img.shape)
            images[i] = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
        out.append(Dataset(images, labels, c, split=split, provenance=family.describe()))
    return out[0], out[1]


def family_shift(a: Dataset, b: Dataset) -> np.ndarray:
    """Absolute per-channel mean difference between two datasets."""
    return np.abs(a.images.mean(axis=(0, 2, 3)) - b.images.mean(axis=(0, 2, 3)))


def batch_iter(dataset: Dataset, batch_size: int, seed=0,
               shuffle: bool = True) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """One epoch of ``(images, labels)`` batches; the last batch may be short."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1", key="train.batch_size")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


# ---------------------------------------------------------------- MEATDAT1 container


def dataset_to_bytes(dataset: Dataset) -> bytes:
    """Encode as MEATDAT1: header, uint8 pixels, uint8 labels."""
    if dataset.normalized:
        raise ConfigError("refusing to write a normalised dataset as uint8 pixels")
    if dataset.num_classes > 256:
        raise ConfigError("MEATDAT1 stores labels as uint8 (at most 256 classes)")
    n, c, h, w = dataset.images.shape
    pixels = np.round(np.clip(dataset.images, 0.0, 1.0) * 255.0).astype(np.uint8)
    return (_HEADER.pack(DATA_MAGIC, n, c, h, w, dataset.num_classes)
            + pixels.tobytes() + dataset.labels.astype(np.uint8).tobytes())


def dataset_from_bytes(raw: bytes, split: str = "train") -> Dataset:
    if len(raw) < 8 or raw[:8] != DATA_MAGIC:
        raise FormatError("bad dataset magic", field="magic", offset=0)
    if len(raw) < HEADER_BYTES:
        raise FormatError("truncated header", field="header", offset=len(raw))
    values = _HEADER.unpack(raw[:HEADER_BYTES])
    for i, (name, value) in enumerate(zip(_HEADER_FIELDS[1:], values[1:])):
        limit = 256 if name == "num_classes" else 1 << 24
        if value == 0 or value > limit:
            raise FormatError(f"implausible {name}={value}", field=name, offset=8 + 4 * i)
    n, c, h, w, classes = values[1:]
    pix_bytes = n * c * h * w
    if len(raw) < HEADER_BYTES + pix_bytes:
        raise FormatError("truncated pixel block", field="pixels", offset=len(raw))
    if len(raw) < HEADER_BYTES + pix_bytes + n:
        raise FormatError("truncated label block", field="labels", offset=len(raw))
    if len(raw) > HEADER_BYTES + pix_bytes + n:
        raise FormatError("trailing bytes after labels", field="eof",
                          offset=HEADER_BYTES + pix_bytes + n)
    pixels = np.frombuffer(raw, dtype=np.uint8, count=pix_bytes, offset=HEADER_BYTES)
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=HEADER_BYTES + pix_bytes)
    bad = np.flatnonzero(labels >= classes)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} >= num_classes {classes}", field="labels",
                          offset=HEADER_BYTES + pix_bytes + int(bad[0]))
    images = pixels.reshape(n, c, h, w).astype(np.float64) / 255.0
    digest = hashlib.sha256(raw).hexdigest()[:16]
    return Dataset(images, labels.astype(np.int64), int(classes), split=split,
                   provenance=f"file:sha256={digest}")


def write_raw_dataset(dataset: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(dataset))


def load_raw_dataset(path, split: str = "train") -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read(), split=split)


def resize_nearest(dataset: Dataset, size: int) -> Dataset:
    """Nearest-neighbour resize to ``size`` x ``size``."""
    _, _, h, w = dataset.images.shape
    if (h, w) == (size, size):
        return dataset
    rows = (np.arange(size) * h // size)
    cols = (np.arange(size) * w // size)
    return replace(dataset, images=dataset.images[:, :, rows][:, :, :, cols])
