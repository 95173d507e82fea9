"""Image containers, CIFAR-10 binary ingestion, and synthetic desk-scale datasets.

Images travel through the toolkit as normalized float32 arrays in (channels,
height, width) layout. Datasets are kept in memory as uint8 pixel planes plus
labels; normalization happens when a batch tensor is requested.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

import numpy as np
import torch

from .errors import FormatError, InputError

# CIFAR-10 binary record: 1 label byte + 3 channel planes of 32*32 pixels.
CIFAR_HW = 32
CIFAR_RECORD_BYTES = 1 + 3 * CIFAR_HW * CIFAR_HW

# Fixed normalization for the synthetic desk-scale datasets. Recorded in every
# ImageTensor and checkpoint so masked/infilled pixels stay interpretable.
DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.25, 0.25, 0.25)


@dataclass(frozen=True)
class Normalization:
    """Per-channel mean/std used to map raw [0,1] pixels to network inputs."""

    mean: tuple[float, ...] = DEFAULT_MEAN
    std: tuple[float, ...] = DEFAULT_STD

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        """Normalize a (c, h, w) float array of raw [0,1] pixel values."""
        mean = np.asarray(self.mean, dtype=pixels.dtype).reshape(-1, 1, 1)
        std = np.asarray(self.std, dtype=pixels.dtype).reshape(-1, 1, 1)
        return (pixels - mean) / std

    def invert(self, data: np.ndarray) -> np.ndarray:
        """Map normalized values back to raw pixel space (clipped to [0,1])."""
        mean = np.asarray(self.mean, dtype=data.dtype).reshape(-1, 1, 1)
        std = np.asarray(self.std, dtype=data.dtype).reshape(-1, 1, 1)
        return np.clip(data * std + mean, 0.0, 1.0)


@dataclass(frozen=True)
class ImageTensor:
    """A normalized network-input image: (channels, height, width) float32."""

    data: np.ndarray
    normalization: Normalization = Normalization()

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise InputError(f"image must be 3-D (c, h, w), got shape {data.shape}")
        c, h, w = data.shape
        if c not in (1, 3):
            raise InputError(f"channel count must be 1 or 3, got {c}")
        if h < 8 or w < 8:
            raise InputError(f"spatial size must be at least 8x8, got {h}x{w}")
        if not np.isfinite(data).all():
            raise InputError("image contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def to_tensor(self) -> torch.Tensor:
        """Batched torch view of shape (1, c, h, w)."""
        return torch.from_numpy(self.data).unsqueeze(0)

    @classmethod
    def from_pixels(cls, pixels: np.ndarray, normalization: Normalization = Normalization()) -> "ImageTensor":
        """Build from raw [0,1] pixel values, applying the normalization."""
        pixels = np.asarray(pixels, dtype=np.float32)
        return cls(normalization.apply(pixels), normalization)


@dataclass
class LabeledImageSet:
    """In-memory labeled image collection (uint8 pixels, CHW layout)."""

    images: np.ndarray  # (n, c, h, w) uint8
    labels: np.ndarray  # (n,) int64
    class_count: int
    normalization: Normalization = Normalization()

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InputError(f"images must be (n, c, h, w), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise InputError("image/label count mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise InputError("label outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.images)

    def batch_tensor(self, indices=None) -> torch.Tensor:
        """Normalized float32 batch (b, c, h, w) for the given indices (all if None)."""
        imgs = self.images if indices is None else self.images[np.asarray(indices)]
        pixels = imgs.astype(np.float32) / 255.0
        mean = np.asarray(self.normalization.mean, dtype=np.float32).reshape(1, -1, 1, 1)
        std = np.asarray(self.normalization.std, dtype=np.float32).reshape(1, -1, 1, 1)
        return torch.from_numpy((pixels - mean) / std)

    def label_tensor(self, indices=None) -> torch.Tensor:
        labels = self.labels if indices is None else self.labels[np.asarray(indices)]
        return torch.from_numpy(labels)

    def image(self, index: int) -> ImageTensor:
        pixels = self.images[index].astype(np.float32) / 255.0
        return ImageTensor.from_pixels(pixels, self.normalization)

    def subset(self, indices) -> "LabeledImageSet":
        indices = np.asarray(indices, dtype=np.int64)
        return dataclasses.replace(self, images=self.images[indices], labels=self.labels[indices])

    def split(self, first: int) -> tuple["LabeledImageSet", "LabeledImageSet"]:
        """Split into the first ``first`` items and the rest (no shuffling)."""
        if not 0 < first < len(self):
            raise InputError(f"split point {first} outside (0, {len(self)})")
        return self.subset(np.arange(first)), self.subset(np.arange(first, len(self)))


# ---------------------------------------------------------------------------
# CIFAR-10 binary format
# ---------------------------------------------------------------------------


def read_cifar_bin(path: str | os.PathLike, class_count: int = 10,
                   normalization: Normalization = Normalization()) -> LabeledImageSet:
    """Read a CIFAR-10 binary file: 3073-byte records (label + R,G,B planes)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
        raise FormatError(
            f"{path}: size {len(raw)} is not a positive multiple of {CIFAR_RECORD_BYTES}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, CIFAR_HW, CIFAR_HW)
    if labels.max(initial=0) >= class_count:
        raise FormatError(f"{path}: label {labels.max()} outside [0, {class_count})")
    return LabeledImageSet(images.copy(), labels, class_count, normalization)


def write_cifar_bin(path: str | os.PathLike, dataset: LabeledImageSet) -> None:
    """Write a LabeledImageSet in CIFAR-10 binary record layout."""
    n, c, h, w = dataset.images.shape
    if (c, h, w) != (3, CIFAR_HW, CIFAR_HW):
        raise InputError(f"CIFAR binary layout requires (3, 32, 32) images, got {(c, h, w)}")
    records = np.empty((n, CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = dataset.labels.astype(np.uint8)
    records[:, 1:] = dataset.images.reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(records.tobytes())


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------

_GLYPH_SIZE = 12


def _glyph_masks() -> np.ndarray:
    """Ten distinct binary 12x12 glyphs, one per class."""
    g = _GLYPH_SIZE
    yy, xx = np.mgrid[0:g, 0:g]
    cy = cx = (g - 1) / 2.0
    r = np.hypot(yy - cy, xx - cx)
    masks = np.zeros((10, g, g), dtype=bool)
    masks[0] = (yy >= 2) & (yy < g - 2) & (xx >= 2) & (xx < g - 2)        # filled square
    border = (yy < 2) | (yy >= g - 2) | (xx < 2) | (xx >= g - 2)
    masks[1] = border                                                      # frame
    masks[2] = r <= 4.6                                                    # disk
    masks[3] = (r <= 5.4) & (r >= 3.2)                                     # ring
    masks[4] = (np.abs(yy - xx) <= 1) | (np.abs(yy + xx - (g - 1)) <= 1)   # X
    masks[5] = (np.abs(yy - cy) <= 1.2) | (np.abs(xx - cx) <= 1.2)         # plus
    masks[6] = (yy % 4) < 2                                                # horizontal stripes
    masks[7] = (xx % 4) < 2                                                # vertical stripes
    masks[8] = np.abs(yy - xx) <= 1.5                                      # single diagonal
    masks[9] = ((yy // 3) + (xx // 3)) % 2 == 0                            # coarse checker
    return masks


def synthesize_glyph_dataset(n: int, seed: int, class_count: int = 10,
                             normalization: Normalization = Normalization()) -> LabeledImageSet:
    """Ten-class 32x32 RGB set: one class-specific glyph per image at a random
    position over a noisy background, plus one class-uninformative distractor
    blob. Shape is the only class signal; color and position are random.
    """
    if not 2 <= class_count <= 10:
        raise InputError("class_count must be in [2, 10]")
    rng = np.random.default_rng(seed)
    glyphs = _glyph_masks()[:class_count]
    hw = CIFAR_HW
    g = _GLYPH_SIZE
    # Balanced labels, shuffled.
    labels = np.tile(np.arange(class_count), n // class_count + 1)[:n]
    rng.shuffle(labels)
    images = np.empty((n, 3, hw, hw), dtype=np.uint8)
    for i, label in enumerate(labels):
        img = rng.uniform(0.05, 0.35, size=(3, hw, hw)).astype(np.float32)
        # Dim distractor blob, identical distribution for every class.
        by, bx = rng.integers(0, hw - 4, size=2)
        img[:, by:by + 4, bx:bx + 4] += rng.uniform(0.1, 0.25)
        # Class glyph in a random bright color at a random position.
        gy, gx = rng.integers(1, hw - g - 1, size=2)
        color = rng.uniform(0.65, 1.0, size=3).astype(np.float32)
        patch = img[:, gy:gy + g, gx:gx + g]
        mask = glyphs[label]
        patch[:, mask] = color[:, None]
        images[i] = np.clip(img * 255.0, 0, 255).astype(np.uint8)
    return LabeledImageSet(images, labels.astype(np.int64), class_count, normalization)


def synthesize_separable_dataset(n: int, seed: int,
                                 normalization: Normalization = Normalization()) -> LabeledImageSet:
    """Two-class linearly separable set: class-dependent global brightness shift."""
    rng = np.random.default_rng(seed)
    labels = np.tile(np.arange(2), n // 2 + 1)[:n]
    rng.shuffle(labels)
    base = rng.uniform(0.0, 0.25, size=(n, 3, CIFAR_HW, CIFAR_HW)).astype(np.float32)
    shift = np.where(labels == 0, 0.15, 0.60).astype(np.float32)
    pixels = base + shift[:, None, None, None]
    images = np.clip(pixels * 255.0, 0, 255).astype(np.uint8)
    return LabeledImageSet(images, labels.astype(np.int64), 2, normalization)
