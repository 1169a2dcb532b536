"""Datasets: IDX ingestion, procedural synthetic corpus, task partitioning."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from .errors import IdxFormatError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray  # (n, H, W) in [0, 1]
    labels: np.ndarray  # (n,) int64, dense 0..k-1
    class_names: list[str]
    # position of every sample in the corpus it was cut from
    index: Optional[np.ndarray] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.index is None:
            self.index = np.arange(len(self.labels), dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("input and label counts differ")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label outside class range")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ValueError("inputs must lie in [0, 1]")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.inputs[rows], self.labels[rows], list(self.class_names), self.index[rows])


def _read_header(buf: bytes, magic: int, what: str):
    if len(buf) < 8:
        raise IdxFormatError(f"{what}: truncated header")
    found, = struct.unpack_from(">I", buf, 0)
    if found != magic:
        raise IdxFormatError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise IdxFormatError(f"{what}: truncated header")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    return dims, 4 + 4 * ndim


def load_idx(image_path, label_path, class_names=None) -> Dataset:
    """Read an IDX image/label file pair (MNIST layout) into a Dataset."""
    images = Path(image_path).read_bytes()
    labels = Path(label_path).read_bytes()
    (n_img, rows, cols), off_i = _read_header(images, IDX_IMAGE_MAGIC, "image file")
    (n_lab,), off_l = _read_header(labels, IDX_LABEL_MAGIC, "label file")
    if n_img != n_lab:
        raise IdxFormatError(f"image count {n_img} != label count {n_lab}")
    if len(images) - off_i < n_img * rows * cols:
        raise IdxFormatError("image file: truncated payload")
    if len(labels) - off_l < n_lab:
        raise IdxFormatError("label file: truncated payload")
    pixels = np.frombuffer(images, dtype=np.uint8, count=n_img * rows * cols, offset=off_i)
    y = np.frombuffer(labels, dtype=np.uint8, count=n_lab, offset=off_l).astype(np.int64)
    if class_names is None:
        k = int(y.max()) + 1 if y.size else 0
        class_names = [str(c) for c in range(k)]
    return Dataset(pixels.reshape(n_img, rows, cols) / 255.0, y, list(class_names))


def _idx_bytes(inputs: np.ndarray, labels: np.ndarray) -> tuple[bytes, bytes]:
    n, rows, cols = inputs.shape
    pixels = np.clip(np.rint(inputs * 255.0), 0, 255).astype(np.uint8)
    img = struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols) + pixels.tobytes()
    lab = struct.pack(">II", IDX_LABEL_MAGIC, n) + labels.astype(np.uint8).tobytes()
    return img, lab


def save_idx(dataset: Dataset, image_path, label_path):
    """Write a Dataset as an IDX pair; pixels are quantised to bytes."""
    from .io import atomic_write_bytes

    img, lab = _idx_bytes(dataset.inputs, dataset.labels)
    atomic_write_bytes(image_path, img)
    atomic_write_bytes(label_path, lab)


def save_images_idx(images: np.ndarray, path):
    """Dump an (n, H, W) array in [0, 1] as an IDX image file (inspection only)."""
    from .io import atomic_write_bytes

    img, _ = _idx_bytes(np.clip(images, 0.0, 1.0), np.zeros(len(images), dtype=np.int64))
    atomic_write_bytes(path, img)


# -- synthetic corpus ------------------------------------------------------

def _class_pattern(c: int, side: int) -> np.ndarray:
    """Noise-free template of class ``c``: a bar, a disk or a checkerboard.

    Templates depend on ``c`` only, so corpora of different sizes agree on
    their shared classes.
    """
    family, variant = c % 3, c // 3
    # golden-ratio phases never repeat
    phase = (variant * 0.6180339887498949) % 1.0
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    cy = cx = (side - 1) / 2.0
    if family == 0:
        theta = np.pi * phase
        dist = np.abs((xx - cx) * np.sin(theta) - (yy - cy) * np.cos(theta))
        return (dist <= side / 14.0).astype(np.float64)
    if family == 1:
        oy = cy + side / 4.0 * np.sin(2 * np.pi * phase)
        ox = cx + side / 4.0 * np.cos(2 * np.pi * phase)
        return (np.hypot(yy - oy, xx - ox) <= side / 6.0).astype(np.float64)
    # cell sizes 2, 3, 4, ...: a one-pixel jitter never maps one onto another
    cell = 2 + variant
    return ((yy // cell + xx // cell) % 2).astype(np.float64)


def synth_dataset(n_classes: int, per_class: int, image_side: int = 28, seed: int = 0,
                  noise: float = 0.05) -> Dataset:
    """Procedural image corpus; one pattern family/phase per class.

    Each sample is its class template shifted by up to one pixel, scaled in
    intensity by U(0.8, 1), plus N(0, noise^2), clipped to [0, 1].
    """
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    rng = np.random.default_rng(seed)
    templates = [_class_pattern(c, image_side) for c in range(n_classes)]
    n = n_classes * per_class
    labels = np.repeat(np.arange(n_classes), per_class)
    shifts = rng.integers(-1, 2, size=(n, 2))
    gains = rng.uniform(0.8, 1.0, size=n)
    noise_field = rng.normal(0.0, noise, size=(n, image_side, image_side))
    images = np.empty((n, image_side, image_side))
    for s in range(n):
        base = np.roll(templates[labels[s]], tuple(shifts[s]), axis=(0, 1))
        images[s] = base * gains[s]
    images = np.clip(images + noise_field, 0.0, 1.0)
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], [str(c) for c in range(n_classes)])


# -- partitioning ----------------------------------------------------------

@dataclass
class SplitSpec:
    source_classes: tuple[int, ...]
    target_classes: tuple[int, ...]
    # target class -> training samples; classes absent here use all that remain
    per_class_counts: dict[int, int] = field(default_factory=dict)
    holdout_per_class: int = 5
    seed: int = 0

    def validate(self, dataset: Dataset):
        src, tgt = set(self.source_classes), set(self.target_classes)
        if src & tgt:
            raise ValueError(f"source and target classes overlap: {sorted(src & tgt)}")
        if not tgt:
            raise ValueError("at least one target class required")
        for c in src | tgt:
            if not 0 <= c < dataset.n_classes:
                raise ValueError(f"class {c} not in dataset")
        for c in self.per_class_counts:
            if c not in tgt:
                raise ValueError(f"per_class_counts names non-target class {c}")
        counts = dataset.class_counts()
        for c in self.target_classes:
            need = self.holdout_per_class + self.per_class_counts.get(c, 0)
            if counts[c] < need:
                raise ValueError(f"class {c} has {counts[c]} samples, {need} requested")


def _relabel(dataset: Dataset, rows: np.ndarray, classes) -> Dataset:
    classes = list(classes)
    remap = np.full(dataset.n_classes, -1, dtype=np.int64)
    remap[classes] = np.arange(len(classes))
    rows = np.asarray(rows, dtype=np.int64)
    return Dataset(dataset.inputs[rows], remap[dataset.labels[rows]],
                   [dataset.class_names[c] for c in classes], dataset.index[rows])


def partition(dataset: Dataset, spec: SplitSpec):
    """Split into (teacher_set, student_train, student_holdout, reject_pool).

    Labels are re-indexed densely within each output, in the order the
    classes are listed in ``spec`` (reject pool: ascending class index).
    """
    spec.validate(dataset)
    rng = np.random.default_rng(spec.seed)
    source = list(spec.source_classes)
    target = list(spec.target_classes)
    rest = [c for c in range(dataset.n_classes) if c not in set(source) | set(target)]

    teacher_rows = np.flatnonzero(np.isin(dataset.labels, source))
    train_rows, hold_rows = [], []
    for c in target:
        rows = rng.permutation(np.flatnonzero(dataset.labels == c))
        hold_rows.append(rows[:spec.holdout_per_class])
        n_train = spec.per_class_counts.get(c, len(rows) - spec.holdout_per_class)
        train_rows.append(rows[spec.holdout_per_class:spec.holdout_per_class + n_train])
    train_rows = np.sort(np.concatenate(train_rows))
    hold_rows = np.sort(np.concatenate(hold_rows))
    reject_rows = np.flatnonzero(np.isin(dataset.labels, rest))
    return (_relabel(dataset, teacher_rows, source),
            _relabel(dataset, train_rows, target),
            _relabel(dataset, hold_rows, target),
            _relabel(dataset, reject_rows, rest))


def subsample(dataset: Dataset, per_class: Union[int, Mapping[int, int]], seed: int) -> Dataset:
    """Seeded per-class sampling without replacement; result order shuffled."""
    rng = np.random.default_rng(seed)
    if isinstance(per_class, int):
        per_class = {c: per_class for c in range(dataset.n_classes)}
    picked = []
    for c in sorted(per_class):
        rows = np.flatnonzero(dataset.labels == c)
        if per_class[c] > len(rows):
            raise ValueError(f"class {c}: {per_class[c]} requested, {len(rows)} available")
        picked.append(rng.choice(rows, size=per_class[c], replace=False))
    rows = np.concatenate(picked) if picked else np.zeros(0, dtype=np.int64)
    return dataset.take(rng.permutation(rows))


def geometric_ramp(n_max: int, decay: float, k: int) -> list[int]:
    """Per-class counts n_max * decay**j, j = 0..k-1 (at least 1 each)."""
    return [max(1, int(round(n_max * decay ** j))) for j in range(k)]
