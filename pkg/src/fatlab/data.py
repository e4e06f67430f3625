"""Datasets: seeded synthetic image generator and a bit-exact binary format.

Synthetic images are class-conditional: each class owns a smooth template
(random Gaussian blobs, contrast-normalized), and samples add seeded
low-frequency blob noise plus per-pixel texture noise.  The signal-to-
noise margin is tunable so a small net separates classes cleanly while
single-step adversarial training at a large relative budget collapses.

The binary format is CIFAR-10-compatible: records of 3073 bytes, one
label byte then 3x1024 pixel bytes (red, green, blue planes, row-major
32x32), pixels scaled to [0, 1] by /255.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from .model import Batch

RECORD_BYTES = 3073
BINARY_SHAPE = (3, 32, 32)


class DatasetFormatError(ValueError):
    """Malformed binary dataset file."""


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"
    num_classes: int = 10
    train_per_class: int = 500
    test_per_class: int = 100
    image_shape: tuple[int, int, int] = (3, 16, 16)
    blobs_per_class: int = 3
    pattern_contrast: float = 0.25
    smooth_noise: float = 0.12
    texture_noise: float = 0.04
    seed: int = 0
    path: Optional[str] = None

    def __post_init__(self):
        if self.source not in ("synthetic", "binary_dir"):
            raise ValueError("source must be 'synthetic' or 'binary_dir'")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("split sizes must be positive")
        if self.source == "binary_dir" and not self.path:
            raise ValueError("binary_dir source needs a path")


@dataclass
class Dataset:
    images: np.ndarray  # [M, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [M] int64
    tag: str = "train"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("image/label count mismatch")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()

    def subset(self, indices: Sequence[int], tag: str | None = None) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.images[idx].copy(), self.labels[idx].copy(), tag or self.tag)

    def head(self, n: int, tag: str | None = None) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))), tag)

    def torch_tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        return torch.from_numpy(self.images), torch.from_numpy(self.labels)

    def full_batch(self) -> Batch:
        images, labels = self.torch_tensors()
        return Batch(images, labels, indices=np.arange(len(self)))

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[Batch]:
        """Deterministic batches; pass an rng for a shuffled epoch."""
        order = np.arange(len(self))
        if rng is not None:
            rng.shuffle(order)
        images, labels = self.torch_tensors()
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield Batch(images[idx], labels[idx], indices=idx)


def _blob(shape: tuple[int, int, int], rng: np.random.Generator,
          sigma_range: tuple[float, float]) -> np.ndarray:
    """One Gaussian bump with random center/width and per-channel amplitude."""
    c, h, w = shape
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    sigma = rng.uniform(*sigma_range)
    amp = rng.uniform(-1.0, 1.0, size=(c, 1, 1))
    yy, xx = np.mgrid[0:h, 0:w]
    bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))
    return amp * bump[None, :, :]


def _class_template(shape, rng, blobs: int, contrast: float) -> np.ndarray:
    h = shape[1]
    t = np.zeros(shape)
    for _ in range(max(blobs, 1)):
        t += _blob(shape, rng, (h / 8.0, h / 3.0))
    peak = np.abs(t).max()
    if peak > 0:
        t = t / peak * contrast
    return 0.5 + t


def generate_synthetic(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) pair of class-conditional blob images."""
    if spec.source != "synthetic":
        raise ValueError("generate_synthetic needs a synthetic spec")
    rng = np.random.default_rng(spec.seed)
    shape = spec.image_shape
    h = shape[1]
    templates = [_class_template(shape, rng, spec.blobs_per_class, spec.pattern_contrast)
                 for _ in range(spec.num_classes)]

    def make_split(per_class: int, tag: str) -> Dataset:
        images = np.empty((spec.num_classes * per_class, *shape), dtype=np.float32)
        labels = np.empty(spec.num_classes * per_class, dtype=np.int64)
        i = 0
        for cls in range(spec.num_classes):
            for _ in range(per_class):
                img = templates[cls].copy()
                if spec.smooth_noise > 0:
                    img += spec.smooth_noise * (_blob(shape, rng, (h / 6.0, h / 2.0))
                                                + _blob(shape, rng, (h / 6.0, h / 2.0)))
                if spec.texture_noise > 0:
                    img += spec.texture_noise * rng.uniform(-1.0, 1.0, size=shape)
                images[i] = np.clip(img, 0.0, 1.0)
                labels[i] = cls
                i += 1
        # interleave classes so contiguous slices stay class-balanced
        order = np.arange(len(labels)).reshape(spec.num_classes, per_class).T.reshape(-1)
        return Dataset(images[order], labels[order], tag)

    return make_split(spec.train_per_class, "train"), make_split(spec.test_per_class, "test")


def load_binary_dataset(path: str | Path, num_classes: int = 10, tag: str = "train") -> Dataset:
    """Read every *.bin record file under path (sorted by name)."""
    root = Path(path)
    files = sorted(root.glob("*.bin"))
    if not files:
        raise DatasetFormatError(f"no .bin record files in {root}")
    chunks = []
    for f in files:
        blob = f.read_bytes()
        if len(blob) == 0 or len(blob) % RECORD_BYTES != 0:
            raise DatasetFormatError(
                f"{f.name}: length {len(blob)} is not a positive multiple of {RECORD_BYTES}")
        chunks.append(np.frombuffer(blob, dtype=np.uint8).reshape(-1, RECORD_BYTES))
    records = np.concatenate(chunks)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if len(bad):
        raise DatasetFormatError(f"record {int(bad[0])}: label {int(labels[bad[0]])} >= {num_classes}")
    images = records[:, 1:].reshape(-1, *BINARY_SHAPE).astype(np.float32) / 255.0
    return Dataset(images, labels, tag)


def write_binary_dataset(dataset: Dataset, path: str | Path,
                         records_per_file: int = 10000, prefix: str = "batch") -> list[Path]:
    """Write the CIFAR-compatible record format; inverse of load_binary_dataset."""
    if tuple(dataset.images.shape[1:]) != BINARY_SHAPE:
        raise DatasetFormatError(f"binary format requires images of shape {BINARY_SHAPE}")
    pixels = np.round(dataset.images * 255.0)
    if pixels.min() < 0 or pixels.max() > 255:
        raise DatasetFormatError("pixel values outside [0, 1]")
    pixels = pixels.astype(np.uint8).reshape(len(dataset), -1)
    labels = dataset.labels
    if labels.min() < 0 or labels.max() > 255:
        raise DatasetFormatError("labels do not fit in one byte")
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for fi, start in enumerate(range(0, len(dataset), records_per_file)):
        sl = slice(start, min(start + records_per_file, len(dataset)))
        rec = np.empty((sl.stop - sl.start, RECORD_BYTES), dtype=np.uint8)
        rec[:, 0] = labels[sl]
        rec[:, 1:] = pixels[sl]
        f = root / f"{prefix}_{fi}.bin"
        f.write_bytes(rec.tobytes())
        written.append(f)
    return written


def load_dataset_pair(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """Materialize (train, test) from either source."""
    if spec.source == "synthetic":
        return generate_synthetic(spec)
    root = Path(spec.path)
    train = load_binary_dataset(root / "train", spec.num_classes, tag="train")
    test = load_binary_dataset(root / "test", spec.num_classes, tag="test")
    return train, test
