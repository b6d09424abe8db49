"""MNIST ingestion: IDX parsing, binary-task filtering and 16x16 preprocessing."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DomainError, FormatError, LengthError, ShapeError

IDX_LABELS = 0x00000801
IDX_IMAGES = 0x00000803
IMAGE_SIDE = 28
CROP_SIDE = 16
CROP_START = 6
DEGENERATE_FILL = 1e-6

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class RawImage:
    pixels: np.ndarray
    label: int

    def __post_init__(self):
        if np.shape(self.pixels) != (IMAGE_SIDE, IMAGE_SIDE):
            raise ShapeError(f"expected a 28x28 image, got shape {np.shape(self.pixels)}")
        if not 0 <= self.label <= 9:
            raise DomainError(f"digit label must be in [0, 9], got {self.label}")


@dataclass(frozen=True)
class LabeledSample:
    """A preprocessed sample.

    ``train_label`` is what the model is trained (or scored) against; it
    differs from ``true_label`` only for poisoned samples.
    """

    features: np.ndarray
    true_label: int
    train_label: int
    is_poisoned: bool = False
    source_index: int = -1

    def __post_init__(self):
        if np.shape(self.features) != (CROP_SIDE * CROP_SIDE,):
            raise ShapeError(f"features must have length 256, got shape {np.shape(self.features)}")
        if not self.is_poisoned and self.train_label != self.true_label:
            raise DomainError("a clean sample must keep its true label")

    def poisoned(self, features: np.ndarray, target_class: int) -> "LabeledSample":
        return replace(self, features=features, train_label=target_class, is_poisoned=True)


def _maybe_gunzip(data: bytes) -> bytes:
    if data[:2] == b"\x1f\x8b":
        return gzip.decompress(data)
    return data


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an IDX label (1-D) or image (3-D) file of unsigned bytes.

    Gzip-wrapped input is accepted transparently.
    """
    data = _maybe_gunzip(bytes(data))
    if len(data) < 4:
        raise LengthError(f"IDX header truncated: {len(data)} bytes")
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in (IDX_LABELS, IDX_IMAGES):
        raise FormatError(f"unsupported IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise LengthError(f"IDX header truncated: {len(data)} bytes, need {header_len}")
    dims = struct.unpack(f">{ndim}I", data[4:header_len])
    count = int(np.prod(dims, dtype=np.int64))
    payload = data[header_len:]
    if len(payload) < count:
        raise LengthError(f"IDX payload has {len(payload)} bytes, header declares {count}")
    if len(payload) > count:
        raise FormatError(f"IDX payload has {len(payload) - count} trailing bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims).copy()


def write_idx(array: np.ndarray) -> bytes:
    """Encode a 1-D label vector or 3-D image stack as IDX bytes."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise FormatError(f"IDX writer only handles uint8, got {array.dtype}")
    if array.ndim not in (1, 3):
        raise ShapeError(f"expected 1-D labels or 3-D images, got {array.ndim}-D")
    magic = IDX_LABELS if array.ndim == 1 else IDX_IMAGES
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    return header + np.ascontiguousarray(array).tobytes()


def load_idx(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        gz = path.with_name(path.name + ".gz")
        if gz.exists():
            path = gz
    return parse_idx(path.read_bytes())


def load_mnist_split(directory, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Images and labels of the ``train`` or ``test`` split from a directory of IDX files."""
    if split not in MNIST_FILES:
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    image_file, label_file = MNIST_FILES[split]
    images = load_idx(Path(directory) / image_file)
    labels = load_idx(Path(directory) / label_file)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images, labels


def filter_binary(images: np.ndarray, labels: np.ndarray, keep: Sequence[int] = (1, 7)):
    """Keep samples whose digit is in ``keep``; returns (images, classes, kept_indices).

    Class indices follow the order of ``keep``: by default digit 1 maps to
    class 0 and digit 7 to class 1.
    """
    labels = np.asarray(labels)
    if len(images) != len(labels):
        raise ShapeError(f"{len(images)} images but {len(labels)} labels")
    keep = list(keep)
    idx = np.flatnonzero(np.isin(labels, keep))
    if idx.size == 0:
        raise DomainError(f"no samples with digits {keep}")
    remap = {digit: cls for cls, digit in enumerate(keep)}
    classes = np.array([remap[int(d)] for d in labels[idx]], dtype=np.int64)
    return np.asarray(images)[idx], classes, idx


def preprocess(image, crop: str = "center") -> np.ndarray:
    """28x28 intensities in [0, 255] -> 256 features in [0, 1], row-major.

    ``crop="center"`` keeps rows and columns [6, 22); ``crop="downscale"``
    resamples the whole image to 16x16 instead.  An all-zero result cannot
    be amplitude encoded, so it is replaced by a small uniform vector.
    """
    pixels = image.pixels if isinstance(image, RawImage) else np.asarray(image)
    if pixels.shape != (IMAGE_SIDE, IMAGE_SIDE):
        raise ShapeError(f"expected a 28x28 image, got shape {pixels.shape}")
    scaled = pixels.astype(np.float64) / 255.0
    if crop == "center":
        patch = scaled[CROP_START:CROP_START + CROP_SIDE, CROP_START:CROP_START + CROP_SIDE]
    elif crop == "downscale":
        patch = np.clip(ndimage.zoom(scaled, CROP_SIDE / IMAGE_SIDE, order=1, grid_mode=True, mode="grid-constant"), 0.0, 1.0)
    else:
        raise ConfigError(f"unknown crop policy {crop!r}")
    features = np.ascontiguousarray(patch).reshape(-1)
    if not np.any(features):
        features = np.full(features.shape, DEGENERATE_FILL)
    return features


def build_samples(images: np.ndarray, classes: np.ndarray, indices: Iterable[int], crop: str = "center") -> list[LabeledSample]:
    return [
        LabeledSample(preprocess(img, crop), int(c), int(c), False, int(i))
        for img, c, i in zip(images, classes, indices)
    ]


def load_binary_task(directory, split: str, digits: Sequence[int] = (1, 7), crop: str = "center") -> list[LabeledSample]:
    images, labels = load_mnist_split(directory, split)
    kept, classes, idx = filter_binary(images, labels, digits)
    return build_samples(kept, classes, idx, crop)


def split(samples: Sequence, train_fraction: float, seed: int):
    """Seeded shuffle into disjoint (train, test) lists."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    order = np.random.default_rng(seed).permutation(len(samples))
    cut = int(round(train_fraction * len(samples)))
    return [samples[i] for i in order[:cut]], [samples[i] for i in order[cut:]]


def features_matrix(samples: Sequence[LabeledSample]) -> np.ndarray:
    return np.stack([s.features for s in samples]) if samples else np.zeros((0, CROP_SIDE * CROP_SIDE))


def subsample_balanced(samples: Sequence[LabeledSample], per_class: dict, seed: int) -> list[LabeledSample]:
    """Draw ``per_class[c]`` samples of each class without replacement, preserving input order."""
    rng = np.random.default_rng(seed)
    chosen = []
    for cls, count in sorted(per_class.items()):
        pool = [i for i, s in enumerate(samples) if s.true_label == cls]
        if count > len(pool):
            raise DomainError(f"class {cls} has {len(pool)} samples, {count} requested")
        chosen.extend(rng.choice(pool, size=count, replace=False).tolist())
    return [samples[i] for i in sorted(chosen)]
