"""Image datasets: IDX and CIFAR binary loaders, stratified subsampling, synthetic blobs."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError

DATA_ROOT_ENV = "GPSA_DATA_ROOT"
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def of(cls, raw: np.ndarray) -> ChannelStats:
        mean = raw.mean(axis=(0, 2, 3))
        std = raw.std(axis=(0, 2, 3))
        return cls(mean, np.where(std > 0, std, 1.0))

    def apply(self, raw: np.ndarray) -> np.ndarray:
        if raw.shape[1] != self.mean.shape[0]:
            raise ContractError(f"stats for {self.mean.shape[0]} channels applied to {raw.shape[1]}")
        return (raw - self.mean[:, None, None]) / self.std[:, None, None]


@dataclass(frozen=True)
class LabeledImageSet:
    """Normalized N x C x H x W images with integer labels.

    ``indices`` maps each row back to the file it was loaded from, so
    subsamples can be compared by identity.
    """

    images: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int
    stats: ChannelStats
    indices: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ContractError(f"split must be 'train' or 'test', got {self.split!r}")
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ContractError("images must be N x C x H x W with one label each")
        if len(self.labels) == 0:
            raise ContractError("empty dataset")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ContractError(f"labels must lie in [0, {self.num_classes})")
        if self.indices is None:
            object.__setattr__(self, "indices", np.arange(len(self.labels)))
        for arr in (self.images, self.labels, self.indices):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def take(self, rows) -> LabeledImageSet:
        rows = np.asarray(rows)
        return replace(self, images=self.images[rows], labels=self.labels[rows], indices=self.indices[rows])


def make_set(raw: np.ndarray, labels, split: str, num_classes: int | None = None,
             stats: ChannelStats | None = None) -> LabeledImageSet:
    """Normalize ``raw`` pixels with ``stats`` (computed from ``raw`` when omitted)."""
    raw = np.asarray(raw, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if stats is None:
        stats = ChannelStats.of(raw)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return LabeledImageSet(stats.apply(raw), labels, split, num_classes, stats)


def data_root() -> Path:
    root = os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigError(f"{DATA_ROOT_ENV} is not set")
    return Path(root)


# -- IDX -----------------------------------------------------------------------

def _read_idx(path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header", len(raw))
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX dimensions", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise FormatError(f"{path}: truncated IDX payload, expected {size} bytes", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train", num_classes: int = 10,
             stats: ChannelStats | None = None) -> LabeledImageSet:
    """Load an IDX image/label file pair (MNIST layout) as single-channel images."""
    images = _read_idx(images_path, IDX_IMAGES)
    labels = _read_idx(labels_path, IDX_LABELS)
    if images.ndim != 3 or labels.ndim != 1:
        raise FormatError(f"IDX ranks {images.ndim}/{labels.ndim}, expected 3/1")
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    return make_set(images[:, None], labels, split, num_classes, stats)


# -- CIFAR ---------------------------------------------------------------------

def read_cifar_records(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(raw)} is not a positive multiple of {CIFAR_RECORD}",
                          len(raw) - len(raw) % CIFAR_RECORD)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), rec[:, 0].copy()


def load_cifar_binary(paths, split: str = "train", stats: ChannelStats | None = None,
                      num_classes: int = 10) -> LabeledImageSet:
    """Load one or more CIFAR-10 binary batches (CHW order)."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    parts = [read_cifar_records(p) for p in paths]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return make_set(images, labels, split, num_classes, stats)


def cifar10_files(root=None) -> tuple[list[Path], Path]:
    root = Path(root) if root is not None else data_root()
    base = root / "cifar-10-batches-bin" if (root / "cifar-10-batches-bin").is_dir() else root
    train = [base / f"data_batch_{i}.bin" for i in range(1, 6)]
    test = base / "test_batch.bin"
    missing = [str(p) for p in train + [test] if not p.is_file()]
    if missing:
        raise ConfigError(f"CIFAR-10 binary batches not found: {', '.join(missing)}")
    return train, test


def load_cifar10(root=None) -> tuple[LabeledImageSet, LabeledImageSet]:
    """Train and test splits; the test split is normalized with train statistics."""
    train_files, test_file = cifar10_files(root)
    train = load_cifar_binary(train_files, "train")
    return train, load_cifar_binary(test_file, "test", stats=train.stats)


# -- subsampling ---------------------------------------------------------------

@dataclass(frozen=True)
class SubsampleSpec:
    fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ConfigError(f"subsample fraction must lie in (0, 1], got {self.fraction}")

    @property
    def epoch_multiplier(self) -> int:
        return max(1, round(1 / self.fraction))


def subsample(data: LabeledImageSet, spec: SubsampleSpec) -> LabeledImageSet:
    """Keep ``max(1, floor(f * count))`` images of each class.

    Each class is ranked by one seeded permutation that does not depend on
    ``f``, so smaller fractions give subsets of larger ones. Test sets are
    returned unchanged.
    """
    if data.split == "test":
        return data
    rng = np.random.default_rng(spec.seed)
    keep = []
    for c in range(data.num_classes):
        rows = np.flatnonzero(data.labels == c)
        order = rng.permutation(len(rows))
        if len(rows) == 0:
            continue
        n = max(1, int(np.floor(spec.fraction * len(rows) + 1e-9)))
        keep.append(rows[order[:n]])
    return data.take(np.sort(np.concatenate(keep)))


# -- synthetic -----------------------------------------------------------------

def blob_centers(num_classes: int, image_size: int) -> np.ndarray:
    """Class blob centres spread on a circle around the image centre."""
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    r = image_size / 4
    c = (image_size - 1) / 2
    return np.stack([c + r * np.sin(angles), c + r * np.cos(angles)], axis=1)


def synthetic_blobs(num_classes: int, per_class: int, image_size: int, seed: int,
                    channels: int = 3, split: str = "train", noise: float = 0.3,
                    stats: ChannelStats | None = None) -> LabeledImageSet:
    """Each class is a Gaussian bump at a fixed location, jittered and noised.

    Class geometry does not depend on ``seed``, so a train and a test set can
    be drawn with different seeds.
    """
    rng = np.random.default_rng(seed)
    centers = blob_centers(num_classes, image_size)
    labels = np.repeat(np.arange(num_classes), per_class)
    rng.shuffle(labels)
    n = len(labels)
    ys, xs = np.mgrid[0:image_size, 0:image_size]
    mu = centers[labels] + rng.uniform(-1.0, 1.0, size=(n, 2))
    width = max(image_size / 8, 1.0)
    d2 = (ys[None] - mu[:, 0, None, None]) ** 2 + (xs[None] - mu[:, 1, None, None]) ** 2
    bump = np.exp(-d2 / (2 * width ** 2))
    gains = 1.0 + 0.25 * np.arange(channels)
    raw = bump[:, None] * gains[None, :, None, None]
    raw = raw + noise * rng.standard_normal(raw.shape)
    return make_set(raw, labels, split, num_classes, stats)
