"""Dataset ingestion (IDX, CIFAR-10 binary) and training-time augmentation."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .group import A, B, apply

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
CIFAR_RECORD = 1 + 3 * 32 * 32


#: pixel values are stored on this dyadic grid, where ``1 - p`` is exact in float32
PIXEL_GRID = 2.0 ** -24


class DataFormatError(ValueError):
    """A dataset file does not match its binary layout."""


def to_pixels(raw: np.ndarray) -> np.ndarray:
    """uint8 intensities -> float32 ``k / 255`` rounded to the nearest multiple of 2**-24.

    The rounding (below 3e-8) makes inversion an exact involution on every
    loaded image, and ``to_pixels(255 - k) == 1 - to_pixels(k)`` bit for bit.
    """
    return (np.round(raw.astype(np.float64) * (2 ** 24 / 255)) * PIXEL_GRID).astype(np.float32)


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels must lie in [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataFormatError("images must be pixel-valued in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "LabeledDataset":
        return LabeledDataset(self.images[index], self.labels[index], self.num_classes)


@dataclass(frozen=True)
class AugmentPolicy:
    random_flip: float = 0.0
    invert_duplicate: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.random_flip <= 1.0:
            raise ValueError(f"random_flip must lie in [0, 1], got {self.random_flip}")


def _read(path: str | Path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz" or raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, name: str) -> np.ndarray:
    if len(raw) < 8:
        raise DataFormatError(f"{name}: truncated header (field 'magic', offset 0)")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise DataFormatError(f"{name}: field 'magic' at offset 0 is {magic}, expected {expected_magic}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{name}: truncated header (field 'dims', offset 4)")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise DataFormatError(
            f"{name}: field 'data' at offset {header} holds {len(raw) - header} bytes, "
            f"dims {dims} require {expected - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx_raw(image_path: str | Path, label_path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 pixels ``(N, H, W)`` and labels ``(N,)``."""
    images = _parse_idx(_read(image_path), IDX_IMAGE_MAGIC, str(image_path))
    labels = _parse_idx(_read(label_path), IDX_LABEL_MAGIC, str(label_path))
    if images.ndim != 3:
        raise DataFormatError(f"{image_path}: field 'dims' has {images.ndim} dimensions, expected 3")
    if labels.ndim != 1:
        raise DataFormatError(f"{label_path}: field 'dims' has {labels.ndim} dimensions, expected 1")
    if len(images) != len(labels):
        raise DataFormatError(
            f"count mismatch: field 'count' (offset 4) is {len(images)} in {image_path} "
            f"but {len(labels)} in {label_path}")
    return images, labels


def load_idx(image_path: str | Path, label_path: str | Path, num_classes: int = 10) -> LabeledDataset:
    images, labels = load_idx_raw(image_path, label_path)
    if len(labels) and labels.max() >= num_classes:
        raise DataFormatError(f"{label_path}: label {labels.max()} >= num_classes {num_classes}")
    x = to_pixels(images)[:, None]
    return LabeledDataset(x, labels.astype(np.int64), num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, image_path: str | Path, label_path: str | Path) -> None:
    """Write uint8 ``(N, H, W)`` pixels and labels as an IDX pair (gzip if the name ends in .gz)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    for arr, path, magic in ((images, image_path, IDX_IMAGE_MAGIC), (labels, label_path, IDX_LABEL_MAGIC)):
        blob = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(gzip.compress(blob, mtime=0) if path.suffix == ".gz" else blob)


def load_cifar10_raw(batch_paths: Sequence[str | Path]) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for path in batch_paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.flatnonzero(rec[:, 0] > 9)
        if bad.size:
            raise DataFormatError(
                f"{path}: label byte {rec[bad[0], 0]} > 9 in record {bad[0]} (offset {bad[0] * CIFAR_RECORD})")
        labels.append(rec[:, 0])
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    return np.concatenate(images), np.concatenate(labels)


def load_cifar10(batch_paths: Sequence[str | Path]) -> LabeledDataset:
    images, labels = load_cifar10_raw(batch_paths)
    return LabeledDataset(to_pixels(images), labels.astype(np.int64), 10)


def write_cifar10(images: np.ndarray, labels: np.ndarray, path: str | Path) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    Path(path).write_bytes(rec.tobytes())


# ---------------------------------------------------------------------------
# dataset directories

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


def _find(root: Path, name: str) -> Path:
    for candidate in (root / name, root / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{root}: neither {name} nor {name}.gz found")


def load_split(dataset: str, data_dir: str | Path, split: str) -> LabeledDataset:
    """Load ``train`` or ``test`` from a directory using the standard file names."""
    root = Path(data_dir)
    if dataset == "mnist":
        img, lbl = MNIST_FILES[split]
        return load_idx(_find(root, img), _find(root, lbl))
    if dataset == "cifar10":
        sub = root / "cifar-10-batches-bin"
        if not (root / CIFAR_FILES[split][0]).exists() and sub.is_dir():
            root = sub
        paths = [root / f for f in CIFAR_FILES[split] if (root / f).exists()]
        if not paths:
            raise FileNotFoundError(f"{root}: no CIFAR-10 {split} batches found")
        return load_cifar10(paths)
    raise ValueError(f"unknown dataset {dataset!r}")


# ---------------------------------------------------------------------------
# augmentation


def augment(ds: LabeledDataset, policy: AugmentPolicy, epoch: int = 0) -> LabeledDataset:
    """Apply ``policy`` once.

    Inversion doubling is deterministic (originals first, inverted copies
    second).  The flip coin is drawn per image from a stream keyed by
    ``(policy.seed, epoch)`` so the trainer gets a fresh draw every epoch.
    """
    images, labels = ds.images, ds.labels
    if policy.invert_duplicate:
        images = np.concatenate([images, apply(B, images, check=False)])
        labels = np.concatenate([labels, labels])
    if policy.random_flip > 0:
        images = flip_some(images, policy.random_flip, np.random.default_rng([policy.seed, epoch]))
    elif images is ds.images:
        images = images.copy()
    return LabeledDataset(images, labels.copy(), ds.num_classes)


def flip_some(images: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    coins = rng.random(len(images)) < prob
    out = images.copy()
    out[coins] = apply(A, images[coins], check=False)
    return out


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


# ---------------------------------------------------------------------------
# desk-scale MNIST

def prepare_mnist_subset(out_dir: str | Path, n_test: int = 1000, seed: int = 0) -> Path:
    """Write the 5000-image MNIST subset shipped with mlxtend as IDX files.

    The images are shuffled with ``seed`` and split into ``5000 - n_test``
    training and ``n_test`` test images under the standard MNIST file names.
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - exercised only without the extra
        raise RuntimeError("the MNIST subset needs the 'mlxtend' package (pip install mlxtend)") from exc
    x, y = mnist_data()
    order = np.random.default_rng(seed).permutation(len(y))
    x = x[order].astype(np.uint8).reshape(-1, 28, 28)
    y = y[order].astype(np.uint8)
    out = Path(out_dir)
    (tr_img, tr_lbl), (te_img, te_lbl) = MNIST_FILES["train"], MNIST_FILES["test"]
    write_idx(x[n_test:], y[n_test:], out / tr_img, out / tr_lbl)
    write_idx(x[:n_test], y[:n_test], out / te_img, out / te_lbl)
    return out
