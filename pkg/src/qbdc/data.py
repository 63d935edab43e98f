"""IDX (MNIST) reading/writing, splitting, and synthetic fixtures."""
from __future__ import annotations

from dataclasses import dataclass
import gzip
from pathlib import Path
import struct

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MAX_DIM = 1 << 28


class IdxFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class Dataset:
    """``images`` is ``(N, H, W)`` for pictures or ``(N, D)`` for feature vectors."""
    images: np.ndarray
    labels: np.ndarray
    classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.classes)


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse(blob: bytes, magic: int, ndim: int) -> tuple[tuple, np.ndarray]:
    header = 4 + 4 * ndim
    if len(blob) < 4:
        raise IdxFormatError("truncated magic number", len(blob))
    (found,) = struct.unpack(">I", blob[:4])
    if found != magic:
        raise IdxFormatError(f"magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    if len(blob) < header:
        raise IdxFormatError("truncated header", len(blob))
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    for k, d in enumerate(dims):
        if d > MAX_DIM:
            raise IdxFormatError(f"dimension {d} too large", 4 + 4 * k)
    need = int(np.prod(dims, dtype=np.int64))
    if len(blob) - header < need:
        raise IdxFormatError(f"truncated payload: {need} bytes declared, "
                             f"{len(blob) - header} present", len(blob))
    data = np.frombuffer(blob, dtype=np.uint8, count=need, offset=header)
    return dims, data.reshape(dims)


def parse_idx_images(blob: bytes) -> np.ndarray:
    return _parse(blob, IMAGE_MAGIC, 3)[1]


def parse_idx_labels(blob: bytes) -> np.ndarray:
    _, labels = _parse(blob, LABEL_MAGIC, 1)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise IdxFormatError(f"label {labels[bad[0]]} out of range", 8 + int(bad[0]))
    return labels


def load_idx_images(path) -> np.ndarray:
    """Raw ``uint8`` images ``(count, rows, cols)``; ``.gz`` files are decompressed."""
    return parse_idx_images(_read_bytes(path))


def load_idx_labels(path) -> np.ndarray:
    return parse_idx_labels(_read_bytes(path))


def idx_images_bytes(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    return struct.pack(">4I", IMAGE_MAGIC, *images.shape) + images.tobytes()


def idx_labels_bytes(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">2I", LABEL_MAGIC, len(labels)) + labels.tobytes()


def to_idx_bytes(ds: Dataset) -> tuple[bytes, bytes]:
    """Inverse of :func:`from_idx`; pixels are quantized back to bytes."""
    return idx_images_bytes(np.rint(ds.images * 255)), idx_labels_bytes(ds.labels)


def from_idx(images: np.ndarray, labels: np.ndarray) -> Dataset:
    return Dataset((images / 255.0).astype(np.float32), labels.astype(np.intp), 10)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist_file(directory, stem) -> Path:
    directory = Path(directory)
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / name).is_file():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist(directory, part: str = "train") -> Dataset:
    img, lab = MNIST_FILES[part]
    return from_idx(load_idx_images(find_mnist_file(directory, img)),
                    load_idx_labels(find_mnist_file(directory, lab)))


def split(ds: Dataset, train: int, validation: int, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first ``train`` and next ``validation`` samples."""
    if train < 0 or validation < 0 or train + validation > len(ds):
        raise ValueError(f"cannot split {len(ds)} samples into {train} + {validation}")
    order = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(order[:train]), ds.subset(order[train:train + validation])


def synthetic_blobs(classes: int, per_class: int, dimension: int, separation: float,
                    seed: int, spread: float = 1.0) -> Dataset:
    """Gaussian clusters around random centers ``separation * N(0, I)``.

    Samples are shuffled and features min-max scaled into [0, 1].
    """
    if min(classes, per_class, dimension) < 1:
        raise ValueError("classes, per_class and dimension must be positive")
    rng = np.random.default_rng(seed)
    centers = separation * rng.standard_normal((classes, dimension))
    labels = np.repeat(np.arange(classes), per_class)
    x = centers[labels] + spread * rng.standard_normal((len(labels), dimension))
    order = rng.permutation(len(labels))
    x, labels = x[order], labels[order]
    lo, hi = x.min(axis=0), x.max(axis=0)
    x = (x - lo) / np.where(hi > lo, hi - lo, 1.0)
    return Dataset(x.astype(np.float32), labels.astype(np.intp), classes)


def load_digits() -> Dataset:
    """scikit-learn's bundled 8x8 handwritten digits, scaled to [0, 1]."""
    from sklearn.datasets import load_digits as _load
    d = _load()
    return Dataset((d.images / 16.0).astype(np.float32), d.target.astype(np.intp), 10)
