"""MNIST IDX parsing and the paired-digit dataset.

Each composed sample places two digits with different labels side by side
(28 high, 56 wide) at their original resolution. Pixels are stored as
``uint8`` and mapped to [-1, 1] with ``x / 127.5 - 1`` when served.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .conditioning import make_condition

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
DIGIT_SIZE = 28
PAIR_SHAPE = (1, DIGIT_SIZE, 2 * DIGIT_SIZE)
NUM_DIGITS = 10
MAX_RESAMPLE_ROUNDS = 64


class IdxFormatError(ValueError):
    """Malformed IDX file. ``offset`` is the byte position of the problem."""

    def __init__(self, path, offset: int, message: str):
        self.path = os.fspath(path)
        self.offset = offset
        super().__init__(f"{self.path}: byte offset {offset}: {message}")


class RejectedPairError(ValueError):
    """Both digits carry the same label; the caller should draw again."""


def _read_bytes(path) -> bytes:
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(path, magic: int, ndim: int, dims: tuple[int, ...] | None) -> np.ndarray:
    data = _read_bytes(path)
    header_len = 4 + 4 * ndim
    if len(data) < 4:
        raise IdxFormatError(path, len(data), "file ends inside the magic number")
    (got,) = struct.unpack_from(">I", data, 0)
    if got != magic:
        raise IdxFormatError(path, 0, f"magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(data) < header_len:
        raise IdxFormatError(path, len(data), f"file ends inside the header ({header_len} bytes expected)")
    shape = struct.unpack_from(f">{ndim}I", data, 4)
    if dims is not None:
        for axis, (want, have) in enumerate(zip(dims, shape[1:]), start=1):
            if want != have:
                raise IdxFormatError(path, 4 + 4 * axis, f"dimension {axis} is {have}, expected {want}")
    payload = int(np.prod(shape, dtype=np.int64))
    if len(data) - header_len < payload:
        raise IdxFormatError(
            path, len(data), f"payload truncated: {payload} bytes declared, {len(data) - header_len} present"
        )
    if len(data) - header_len > payload:
        raise IdxFormatError(path, header_len + payload, "trailing bytes after the declared payload")
    return np.frombuffer(data, dtype=np.uint8, count=payload, offset=header_len).reshape(shape).copy()


def load_idx_images(path) -> np.ndarray:
    """Read an IDX image file into an ``N x 28 x 28`` uint8 array."""
    return _parse_idx(path, IMAGE_MAGIC, 3, (DIGIT_SIZE, DIGIT_SIZE))


def load_idx_labels(path) -> np.ndarray:
    return _parse_idx(path, LABEL_MAGIC, 1, None)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def load_mnist(directory, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    prefix = "train" if split == "train" else "t10k"
    directory = os.fspath(directory)
    images = load_idx_images(_find(directory, f"{prefix}-images-idx3-ubyte"))
    labels = load_idx_labels(_find(directory, f"{prefix}-labels-idx1-ubyte"))
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels in {directory}")
    return images, labels


def _find(directory: str, stem: str) -> str:
    for name in (stem, stem + ".gz"):
        path = os.path.join(directory, name)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(os.path.join(directory, stem))


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


@dataclass(frozen=True)
class RawDigit:
    pixels: np.ndarray
    label: int

    def __post_init__(self):
        if self.pixels.shape != (DIGIT_SIZE, DIGIT_SIZE) or self.pixels.dtype != np.uint8:
            raise ValueError(f"digit must be 28x28 uint8, got {self.pixels.shape} {self.pixels.dtype}")
        if not 0 <= self.label < NUM_DIGITS:
            raise ValueError(f"label {self.label} outside [0, 9]")


@dataclass(frozen=True)
class ComposedSample:
    image: np.ndarray  # float32, 1 x 28 x 56, in [-1, 1]
    condition: np.ndarray  # uint8, length 10


def compose_pixels(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    return np.concatenate([left, right], axis=-1)


def compose_pair(a: RawDigit, b: RawDigit) -> ComposedSample:
    """Put ``a`` in columns 0-27 and ``b`` in columns 28-55."""
    if a.label == b.label:
        raise RejectedPairError(f"both digits are {a.label}")
    image = to_unit_range(compose_pixels(a.pixels, b.pixels))[None]
    return ComposedSample(image, make_condition({a.label, b.label}, NUM_DIGITS))


@dataclass
class PairDataset:
    """Composed pairs kept as uint8: ``pixels`` is ``N x 28 x 56``."""

    pixels: np.ndarray
    conditions: np.ndarray
    left_index: np.ndarray
    right_index: np.ndarray

    def __len__(self) -> int:
        return len(self.pixels)

    def __getitem__(self, i: int) -> ComposedSample:
        cond = self.conditions[i].copy()
        cond.flags.writeable = False
        return ComposedSample(to_unit_range(self.pixels[i])[None], cond)

    def images(self, idx=slice(None)) -> np.ndarray:
        return to_unit_range(self.pixels[idx])[:, None]


def build_dataset(images: np.ndarray, labels: np.ndarray, n_samples: int, seed: int) -> PairDataset:
    """Draw ``n_samples`` digit pairs with replacement, redrawing equal-label pairs."""
    if n_samples <= 0:
        raise ValueError(f"n_samples must be positive, got {n_samples}")
    if len(images) == 0 or len(images) != len(labels):
        raise ValueError(f"need matching non-empty images/labels, got {len(images)} and {len(labels)}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    left = rng.integers(0, len(images), size=n_samples)
    right = rng.integers(0, len(images), size=n_samples)
    for _ in range(MAX_RESAMPLE_ROUNDS):
        bad = np.flatnonzero(labels[left] == labels[right])
        if bad.size == 0:
            break
        left[bad] = rng.integers(0, len(images), size=bad.size)
        right[bad] = rng.integers(0, len(images), size=bad.size)
    else:
        raise RejectedPairError(
            f"could not draw distinct-label pairs after {MAX_RESAMPLE_ROUNDS} rounds "
            f"(labels present: {sorted(set(labels.tolist()))})"
        )
    pixels = compose_pixels(images[left], images[right])
    conditions = np.zeros((n_samples, NUM_DIGITS), dtype=np.uint8)
    rows = np.arange(n_samples)
    conditions[rows, labels[left]] = 1
    conditions[rows, labels[right]] = 1
    return PairDataset(pixels, conditions, left, right)


@dataclass
class LabeledBatch:
    images: np.ndarray  # float32, B x 1 x 28 x 56
    conditions: np.ndarray  # uint8, B x C

    def __len__(self) -> int:
        return len(self.images)


def batches_per_epoch(n: int, batch_size: int) -> int:
    return n // batch_size


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def iter_epoch(dataset: PairDataset, batch_size: int, seed: int, epoch: int, start: int = 0) -> Iterator[LabeledBatch]:
    """Yield the batches of one epoch, beginning at batch ``start``."""
    _check_batch_size(len(dataset), batch_size)
    order = epoch_order(len(dataset), seed, epoch)
    for k in range(start, batches_per_epoch(len(dataset), batch_size)):
        idx = order[k * batch_size : (k + 1) * batch_size]
        yield LabeledBatch(dataset.images(idx), dataset.conditions[idx])


def batches(dataset: PairDataset, batch_size: int, seed: int, epochs: int | None = None) -> Iterator[LabeledBatch]:
    """Shuffled batches over ``epochs`` epochs (forever if ``None``); partial batches dropped."""
    _check_batch_size(len(dataset), batch_size)
    epoch = 0
    while epochs is None or epoch < epochs:
        yield from iter_epoch(dataset, batch_size, seed, epoch)
        epoch += 1


def _check_batch_size(n: int, batch_size: int) -> None:
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
