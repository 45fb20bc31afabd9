"""Toy segmentation data: colored shapes on a textured background.

Images are quantized to multiples of 1/255 at generation time so that the
binary dump format round-trips exactly.
"""
from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ContractError

MASK64 = (1 << 64) - 1
DATASET_MAGIC = b"LDSD"
DATASET_VERSION = 1

# fixed, well separated colors for the first classes; class 0 is background
_BASE_PALETTE = [
    (0.15, 0.15, 0.15),
    (0.85, 0.20, 0.20),
    (0.20, 0.80, 0.25),
    (0.20, 0.30, 0.90),
    (0.90, 0.85, 0.20),
    (0.85, 0.25, 0.85),
    (0.20, 0.85, 0.85),
    (0.95, 0.95, 0.95),
]
SHAPE_JITTER = 0.03
TEXTURE_NOISE = 0.05


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


def derive_seed(master: int, tag: str, index: int = 0) -> int:
    """Mix (master seed, purpose tag, index) into an independent 64-bit seed."""
    h = splitmix64(master & MASK64)
    h = splitmix64(h ^ _fnv1a64(tag))
    return splitmix64(h ^ (index & MASK64))


def rng_for(master: int, tag: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, tag, index))


def class_palette(num_classes: int) -> np.ndarray:
    colors = list(_BASE_PALETTE[:num_classes])
    extra = num_classes - len(colors)
    for i in range(extra):
        colors.append(colorsys.hsv_to_rgb((i + 0.5) / extra, 0.6, 0.6))
    return np.asarray(colors, dtype=np.float64)


@dataclass
class Dataset:
    images: np.ndarray  # (M, H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (M, H, W) uint8 class indices
    num_classes: int
    seed: int = 0

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ContractError(f"images must be (M, H, W, 3), got {self.images.shape}")
        if self.labels.shape != self.images.shape[:3]:
            raise ContractError(f"labels {self.labels.shape} do not match images {self.images.shape}")
        if self.num_classes < 2:
            raise ContractError("need at least two classes")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ContractError("label index out of range")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.seed)


def _shape_mask(kind: str, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    size = rng.integers(max(3, min(h, w) // 6), max(4, min(h, w) // 3) + 1)
    cy = rng.integers(size // 2, h - size // 2)
    cx = rng.integers(size // 2, w - size // 2)
    if kind == "rectangle":
        hh = size // 2
        hw = max(1, rng.integers(size // 3, size // 2 + 1))
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    if kind == "disk":
        r = size / 2
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    # isosceles triangle, apex up, centered on (cy, cx)
    hh = size // 2
    rows = yy - (cy - hh)
    inside_rows = (rows >= 0) & (rows <= 2 * hh)
    half_width = rows / 2.0
    return inside_rows & (np.abs(xx - cx) <= half_width)


def generate_shapes_dataset(seed: int, m: int, height: int, width: int, num_classes: int) -> Dataset:
    """Generate ``m`` samples of 1..3 non-overlapping filled shapes over background.

    Shape colors follow the class palette with a small per-shape jitter, and
    every pixel gets uniform texture noise. Sample ``i`` draws its first
    shape's class cyclically so every class shows up once ``m`` is large
    enough (``m >= num_classes - 1``).
    """
    if num_classes < 2:
        raise ContractError(f"num_classes must be >= 2, got {num_classes}")
    if m < 1:
        raise ContractError(f"sample count must be >= 1, got {m}")
    if height < 8 or width < 8:
        raise ContractError(f"images must be at least 8x8, got {height}x{width}")
    palette = class_palette(num_classes)
    images = np.empty((m, height, width, 3), dtype=np.float32)
    labels = np.zeros((m, height, width), dtype=np.uint8)
    kinds = ("rectangle", "disk", "triangle")
    for i in range(m):
        rng = rng_for(seed, "sample", i)
        label = labels[i]
        color = np.empty((height, width, 3))
        color[:] = palette[0] + rng.uniform(-SHAPE_JITTER, SHAPE_JITTER, 3)
        occupied = np.zeros((height, width), dtype=bool)
        n_shapes = int(rng.integers(1, 4))
        for j in range(n_shapes):
            cls = 1 + (i % (num_classes - 1)) if j == 0 else int(rng.integers(1, num_classes))
            kind = kinds[int(rng.integers(0, 3))]
            for _ in range(20):
                mask = _shape_mask(kind, rng, height, width)
                grown = mask.copy()
                grown[1:] |= mask[:-1]
                grown[:-1] |= mask[1:]
                grown[:, 1:] |= mask[:, :-1]
                grown[:, :-1] |= mask[:, 1:]
                if mask.any() and not (grown & occupied).any():
                    break
            else:
                continue
            occupied |= mask
            label[mask] = cls
            color[mask] = palette[cls] + rng.uniform(-SHAPE_JITTER, SHAPE_JITTER, 3)
        color += rng.uniform(-TEXTURE_NOISE, TEXTURE_NOISE, color.shape)
        images[i] = np.round(np.clip(color, 0.0, 1.0) * 255.0).astype(np.float32) / np.float32(255.0)
    return Dataset(images, labels, num_classes, seed)


def split_dataset(
    dataset: Dataset,
    train_fraction: float,
    val_fraction: float,
    holdout_fraction_of_val: float,
    seed: int,
) -> tuple[Dataset, Dataset, Dataset]:
    """Split into (train, val, holdout); holdout is carved out of validation.

    ``val = floor(val_fraction * M)``, ``holdout = floor(h * val)`` and the
    returned validation part is what is left; train takes the remainder.
    """
    if abs(train_fraction + val_fraction - 1.0) > 1e-9:
        raise ContractError(f"train + val fractions must sum to 1, got {train_fraction} + {val_fraction}")
    if not (0 <= train_fraction <= 1 and 0 <= val_fraction <= 1):
        raise ContractError("split fractions must lie in [0, 1]")
    if not 0 < holdout_fraction_of_val < 1:
        raise ContractError("holdout fraction must lie in (0, 1)")
    m = len(dataset)
    n_val = int(np.floor(val_fraction * m))
    n_hold = int(np.floor(holdout_fraction_of_val * n_val))
    order = rng_for(seed, "split").permutation(m)
    val_all = order[:n_val]
    holdout_idx = np.sort(val_all[:n_hold])
    val_idx = np.sort(val_all[n_hold:])
    train_idx = np.sort(order[n_val:])
    return dataset.subset(train_idx), dataset.subset(val_idx), dataset.subset(holdout_idx)


def flip_decision(seed: int) -> bool:
    return bool(rng_for(seed, "flip").random() < 0.5)


def random_flip(image: np.ndarray, label: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Mirror image and label map horizontally together with probability 1/2."""
    if image.shape[:2] != label.shape:
        raise ContractError(f"image {image.shape} and label {label.shape} dimensions differ")
    if flip_decision(seed):
        return image[:, ::-1].copy(), label[:, ::-1].copy()
    return image, label


def dataset_to_bytes(dataset: Dataset) -> bytes:
    m, h, w, _ = dataset.images.shape
    header = DATASET_MAGIC + struct.pack("<HIIII", DATASET_VERSION, h, w, dataset.num_classes, m)
    rgb = np.round(dataset.images * 255.0).astype(np.uint8)
    body = bytearray()
    for i in range(m):
        body += rgb[i].tobytes()
        body += dataset.labels[i].astype(np.uint8).tobytes()
    return header + bytes(body)


def dataset_from_bytes(blob: bytes, seed: int = 0) -> Dataset:
    if blob[:4] != DATASET_MAGIC:
        raise ContractError("not a dataset file (bad magic)")
    version, h, w, k, m = struct.unpack_from("<HIIII", blob, 4)
    if version != DATASET_VERSION:
        raise ContractError(f"unsupported dataset version {version}")
    offset = 4 + struct.calcsize("<HIIII")
    per = h * w * 3 + h * w
    if len(blob) != offset + m * per:
        raise ContractError("dataset file is truncated or has trailing bytes")
    raw = np.frombuffer(blob, dtype=np.uint8, offset=offset).reshape(m, per)
    images = (raw[:, : h * w * 3].reshape(m, h, w, 3).astype(np.float32)) / np.float32(255.0)
    labels = raw[:, h * w * 3 :].reshape(m, h, w).copy()
    return Dataset(images, labels, k, seed)


def save_dataset(dataset: Dataset, path) -> None:
    from .io import atomic_write_bytes

    atomic_write_bytes(Path(path), dataset_to_bytes(dataset))


def load_dataset(path, seed: int = 0) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes(), seed)
