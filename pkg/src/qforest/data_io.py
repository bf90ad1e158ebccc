"""Dataset ingestion and pixel feature maps.

Readers for the MNIST IDX and CIFAR-10 binary layouts, block-mean /
bilinear downscaling, cyclic shifts and the per-pixel feature map
``x -> (x, 1 - x) / sqrt(x**2 + (1 - x)**2)``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ArgumentError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class ImageDataset:
    """Images of shape ``(count, L, L, k)`` in [0, 1] and integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[1] != images.shape[2]:
            raise ArgumentError(
                f"images must have shape (count, L, L, k), got {images.shape}"
            )
        if len(images) != len(labels):
            raise ArgumentError(
                f"{len(images)} images but {len(labels)} labels"
            )
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ArgumentError("pixel values must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ArgumentError(f"labels must lie in [0, {self.num_classes})")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def side(self) -> int:
        return self.images.shape[1]

    @property
    def channels(self) -> int:
        return self.images.shape[3]

    def subset(self, size: int, seed: int | None = None) -> "ImageDataset":
        """Seeded shuffle followed by a prefix of ``size`` samples (0 = all)."""
        if size < 0 or size > len(self):
            raise ArgumentError(f"cannot take {size} samples from a dataset of {len(self)}")
        order = np.arange(len(self))
        if seed is not None:
            order = np.random.default_rng(seed).permutation(len(self))
        if size:
            order = order[:size]
        return ImageDataset(self.images[order], self.labels[order], self.num_classes)


# -- readers ---------------------------------------------------------------


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    data = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{path}: truncated IDX header")
    found = struct.unpack(">I", data[:4])[0]
    if found != magic:
        raise FormatError(
            f"{path}: bad magic number 0x{found:08x}, expected 0x{magic:08x}"
        )
    dims = struct.unpack(">" + "I" * ndim, data[4:header])
    expected = int(np.prod(dims))
    payload = np.frombuffer(data, dtype=np.uint8, offset=header)
    if payload.size < expected:
        raise FormatError(
            f"{path}: truncated payload ({payload.size} of {expected} bytes)"
        )
    return payload[:expected].reshape(dims)


def load_mnist(image_path, label_path) -> ImageDataset:
    raw = _read_idx(image_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(label_path, IDX_LABELS_MAGIC, 1)
    if len(raw) != len(labels):
        raise FormatError(
            f"{len(raw)} images in {image_path} but {len(labels)} labels in {label_path}"
        )
    images = raw.astype(np.float64)[..., None] / 255.0
    return ImageDataset(images, labels.astype(np.int64), 10)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (rank 1 labels or rank 3 images)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {1: IDX_LABELS_MAGIC, 3: IDX_IMAGES_MAGIC}.get(array.ndim)
    if magic is None:
        raise ArgumentError(f"IDX writer supports rank 1 or 3, got {array.ndim}")
    header = struct.pack(">I" + "I" * array.ndim, magic, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_cifar10(batch_paths: Sequence) -> ImageDataset:
    images, labels = [], []
    for path in batch_paths:
        data = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
        if data.size % CIFAR_RECORD:
            raise FormatError(
                f"{path}: size {data.size} is not a multiple of {CIFAR_RECORD}"
            )
        records = data.reshape(-1, CIFAR_RECORD)
        labels.append(records[:, 0].astype(np.int64))
        # R plane, G plane, B plane, each row-major 32x32
        planes = records[:, 1:].reshape(-1, 3, 32, 32)
        images.append(planes.transpose(0, 2, 3, 1).astype(np.float64) / 255.0)
    if not images:
        return ImageDataset(np.zeros((0, 32, 32, 3)), np.zeros(0, np.int64), 10)
    return ImageDataset(np.concatenate(images), np.concatenate(labels), 10)


# -- geometry --------------------------------------------------------------


def _bilinear_weights(src: int, dst: int) -> np.ndarray:
    """Interpolation matrix sampling ``src`` pixels at ``dst`` block centers."""
    centers = (np.arange(dst) + 0.5) * src / dst - 0.5
    centers = np.clip(centers, 0.0, src - 1)
    lo = np.floor(centers).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = centers - lo
    w = np.zeros((dst, src))
    w[np.arange(dst), lo] += 1.0 - frac
    w[np.arange(dst), hi] += frac
    return w


def downscale_images(images: np.ndarray, target: int) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    src = images.shape[1]
    if not _is_pow2(target):
        raise ArgumentError(f"target side {target} is not a power of two")
    if target > src:
        raise ArgumentError(f"target side {target} exceeds source side {src}")
    if src % target == 0:
        f = src // target
        n, _, _, k = images.shape
        return images.reshape(n, target, f, target, f, k).mean(axis=(2, 4))
    w = _bilinear_weights(src, target)
    out = np.einsum("ar,nrck,bc->nabk", w, images, w)
    return np.clip(out, 0.0, 1.0)


def downscale(ds: ImageDataset, target_L: int) -> ImageDataset:
    """Block-average when the side divides evenly, bilinear otherwise."""
    return ImageDataset(downscale_images(ds.images, target_L), ds.labels, ds.num_classes)


def cyclic_shift(img: np.ndarray, dv: int, dh: int) -> np.ndarray:
    """Move pixel ``(r, c)`` to ``((r + dv) % L, (c + dh) % L)``."""
    return np.roll(img, (dv, dh), axis=(0, 1))


def default_shift(t: int) -> tuple[int, int]:
    """Shift ``(dv, dh)`` for the ``t``-th tree of a forest.

    Even ``t`` shift horizontally by ``t / 2``, odd ``t`` vertically by
    ``(t + 1) / 2``.
    """
    if t % 2 == 0:
        return (0, t // 2)
    return ((t + 1) // 2, 0)


# -- feature map -----------------------------------------------------------


def local_feature(pixel) -> np.ndarray:
    """Unit-norm feature vector of length ``2**k`` for a ``k``-channel pixel."""
    p = np.atleast_1d(np.asarray(pixel, dtype=np.float64))
    if p.ndim != 1:
        raise ArgumentError(f"pixel must be a vector of channels, got shape {p.shape}")
    return pixel_features(p[None, :])[0]


def pixel_features(pixels: np.ndarray) -> np.ndarray:
    """Vectorized feature map: ``(..., k)`` channel values -> ``(..., 2**k)``.

    Channel order follows the Kronecker product phi(c0) x phi(c1) x ...,
    so channel 0 is the most significant bit of the output index and
    component 0 of each factor is ``x``.
    """
    p = np.asarray(pixels, dtype=np.float64)
    if p.size and (p.min() < 0.0 or p.max() > 1.0 or not np.all(np.isfinite(p))):
        raise ArgumentError("pixel channels must lie in [0, 1]")
    norm = np.sqrt(p**2 + (1.0 - p) ** 2)
    phi = np.stack([p / norm, (1.0 - p) / norm], axis=-1)  # (..., k, 2)
    out = phi[..., 0, :]
    for c in range(1, p.shape[-1]):
        out = (out[..., :, None] * phi[..., c, None, :]).reshape(*p.shape[:-1], -1)
    return out


def resolve_data_path(path) -> Path:
    """Resolve a dataset path, falling back to ``$QFOREST_DATA_DIR/path``."""
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    base = os.environ.get("QFOREST_DATA_DIR")
    if base:
        candidate = Path(base) / p
        if candidate.exists():
            return candidate
    return p
