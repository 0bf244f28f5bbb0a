"""Image datasets: STL10 binary files, a synthetic shape generator, batching.

STL10 binaries are raw concatenations of 3 x 96 x 96 uint8 images. Each
channel is stored column-major, so a file decodes as (N, C, W, H) and is
transposed to (N, C, H, W) here. Labels are one byte per image, 1..K.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

STL10_SIZE = 96
STL10_BYTES = 3 * STL10_SIZE * STL10_SIZE
SPLITS = ("unlabeled", "train", "test")
META_FILE = "meta.cfg"


class DataError(ValueError):
    pass


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, 3, H, W) uint8
    labels: np.ndarray | None = None  # (N,) values 1..K
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DataError(f"images must be (N, 3, H, W), got {self.images.shape}")
        if self.labels is not None:
            if len(self.labels) != len(self.images):
                raise DataError(f"{len(self.labels)} labels for {len(self.images)} images")
            if len(self.labels) and self.labels.min() < 1:
                raise DataError("labels must start at 1")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> int:
        return self.images.shape[2]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) if self.labels is not None and len(self.labels) else 0

    def class_counts(self) -> dict[int, int]:
        if self.labels is None:
            return {}
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    def subset(self, idx: np.ndarray) -> "ImageDataset":
        labels = self.labels[idx] if self.labels is not None else None
        return ImageDataset(self.images[idx], labels, self.split)


# ---------------------------------------------------------------- binary files


def decode_images(raw: bytes, image_size: int = STL10_SIZE, source: str = "<bytes>") -> np.ndarray:
    per = 3 * image_size * image_size
    if len(raw) % per:
        whole = len(raw) // per
        raise DataError(
            f"{source}: truncated image data at byte offset {whole * per} "
            f"({len(raw)} bytes is not a multiple of {per})"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3, image_size, image_size)
    return np.ascontiguousarray(arr.transpose(0, 1, 3, 2))


def encode_images(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    return np.ascontiguousarray(images.transpose(0, 1, 3, 2)).tobytes()


def read_image_file(path, image_size: int = STL10_SIZE) -> np.ndarray:
    """Memory-map an image file; the (N, 3, H, W) result is a read-only view."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image file not found: {path}")
    per = 3 * image_size * image_size
    size = path.stat().st_size
    if size % per:
        raise DataError(
            f"{path}: truncated image data at byte offset {size // per * per} "
            f"({size} bytes is not a multiple of {per})"
        )
    if size == 0:
        return np.zeros((0, 3, image_size, image_size), dtype=np.uint8)
    mm = np.memmap(path, dtype=np.uint8, mode="r", shape=(size // per, 3, image_size, image_size))
    return mm.transpose(0, 1, 3, 2)


def read_label_file(path, expected: int) -> np.ndarray:
    path = Path(path)
    labels = np.frombuffer(path.read_bytes(), dtype=np.uint8).copy()
    if len(labels) != expected:
        offset = min(len(labels), expected)
        raise DataError(
            f"{path}: label count {len(labels)} does not match {expected} images (mismatch at byte offset {offset})"
        )
    if len(labels) and labels.min() < 1:
        bad = int(np.argmax(labels < 1))
        raise DataError(f"{path}: label 0 at byte offset {bad}; labels must be 1..K")
    return labels


def _meta_size(root: Path) -> int:
    meta = root / META_FILE
    if meta.exists():
        for line in meta.read_text().splitlines():
            key, _, value = line.partition("=")
            if key.strip() == "image_size":
                return int(value)
    return STL10_SIZE


def read_stl10(path, split: str = "train", image_size: int | None = None) -> ImageDataset:
    """Read ``{split}_X.bin`` (and ``{split}_y.bin`` if present) from a directory."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}; expected one of {SPLITS}")
    size = image_size or _meta_size(root)
    images = read_image_file(root / f"{split}_X.bin", size)
    label_path = root / f"{split}_y.bin"
    labels = read_label_file(label_path, len(images)) if label_path.exists() else None
    return ImageDataset(images, labels, split)


def write_stl10(dataset: ImageDataset, path, split: str | None = None) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    split = split or dataset.split
    (root / f"{split}_X.bin").write_bytes(encode_images(dataset.images))
    if dataset.labels is not None:
        (root / f"{split}_y.bin").write_bytes(np.asarray(dataset.labels, dtype=np.uint8).tobytes())
    if dataset.image_size != STL10_SIZE:
        (root / META_FILE).write_text(f"image_size = {dataset.image_size}\n")


# ------------------------------------------------------------------- synthetic


SHAPES = ("disk", "square", "triangle", "plus", "ring", "diamond", "hbar", "vbar", "cross", "half")


@dataclass
class SyntheticSpec:
    classes: int = 4
    per_class: int = 500
    image_size: int = 32
    seed: int = 0
    color_correlation: float = 0.75
    min_scale: float = 0.22
    max_scale: float = 0.4
    noise: float = 0.04

    def __post_init__(self):
        if not 1 <= self.classes <= len(SHAPES):
            raise DataError(f"classes must be in 1..{len(SHAPES)}")
        if self.per_class < 0 or self.image_size < 8:
            raise DataError("per_class must be >= 0 and image_size >= 8")


def _shape_mask(kind: str, dx: np.ndarray, dy: np.ndarray, r: np.ndarray) -> np.ndarray:
    ax, ay = np.abs(dx), np.abs(dy)
    d2 = dx * dx + dy * dy
    if kind == "disk":
        return d2 <= r * r
    if kind == "square":
        return np.maximum(ax, ay) <= 0.8 * r
    if kind == "triangle":
        return (dy <= 0.8 * r) & (dy >= -r) & (ax <= (dy + r) * 0.55)
    if kind == "plus":
        return ((ax <= r / 3) & (ay <= r)) | ((ay <= r / 3) & (ax <= r))
    if kind == "ring":
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "diamond":
        return ax + ay <= 1.1 * r
    if kind == "hbar":
        return (ay <= r / 3) & (ax <= r)
    if kind == "vbar":
        return (ax <= r / 3) & (ay <= r)
    if kind == "cross":
        return (np.abs(ax - ay) <= r / 4) & (np.maximum(ax, ay) <= r)
    return (d2 <= r * r) & (dy <= 0)


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized HSV -> RGB; inputs in [0, 1], output (..., 3)."""
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    table = np.stack(
        [
            np.stack([v, t, p], -1),
            np.stack([q, v, p], -1),
            np.stack([p, v, t], -1),
            np.stack([p, q, v], -1),
            np.stack([t, p, v], -1),
            np.stack([v, p, q], -1),
        ]
    )
    return np.take_along_axis(table, i[None, ..., None], axis=0)[0]


def make_synthetic(spec: SyntheticSpec, split: str = "train") -> ImageDataset:
    """K classes of filled shapes on textured backgrounds.

    Shape is tied to the class. Hue follows the class with probability
    ``color_correlation`` and is random otherwise; position, size, and the
    background are nuisances.
    """
    rng = np.random.default_rng(spec.seed)
    k, n, size = spec.classes, spec.per_class, spec.image_size
    labels = np.repeat(np.arange(1, k + 1), n)
    rng.shuffle(labels)
    total = len(labels)
    cls = labels - 1

    r = rng.uniform(spec.min_scale, spec.max_scale, total) * size
    cx = rng.uniform(r, size - r)
    cy = rng.uniform(r, size - r)
    yy, xx = np.mgrid[0:size, 0:size].astype(float) + 0.5
    dx = xx[None] - cx[:, None, None]
    dy = yy[None] - cy[:, None, None]
    rr = r[:, None, None]
    mask = np.zeros((total, size, size), dtype=bool)
    for c in range(k):
        sel = cls == c
        mask[sel] = _shape_mask(SHAPES[c], dx[sel], dy[sel], rr[sel])

    tied = rng.random(total) < spec.color_correlation
    hue = np.where(tied, (cls / k + rng.normal(0, 0.04, total)) % 1.0, rng.random(total))
    fg = hsv_to_rgb(hue, rng.uniform(0.6, 1.0, total), rng.uniform(0.7, 1.0, total))
    bg_hue = rng.random(total)
    bg = hsv_to_rgb(bg_hue, rng.uniform(0.0, 0.4, total), rng.uniform(0.1, 0.45, total))

    # low-frequency background gradient
    gx = rng.normal(0, 0.15, total)[:, None, None] * (xx[None] / size - 0.5)
    gy = rng.normal(0, 0.15, total)[:, None, None] * (yy[None] / size - 0.5)
    img = np.where(mask[..., None], fg[:, None, None, :], bg[:, None, None, :] + (gx + gy)[..., None])
    img = img + rng.normal(0, spec.noise, img.shape)
    img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return ImageDataset(np.ascontiguousarray(img.transpose(0, 3, 1, 2)), labels.astype(np.uint8), split)


# -------------------------------------------------------------------- batching


def batch_indices(n: int, batch_size: int, seed: int | np.random.SeedSequence, drop_last: bool = True) -> Iterator[np.ndarray]:
    """Seeded permutation of range(n) cut into batches."""
    if batch_size < 1:
        raise DataError("batch size must be >= 1")
    order = np.random.default_rng(seed).permutation(n)
    stop = n - n % batch_size if drop_last else n
    for lo in range(0, stop, batch_size):
        yield order[lo : lo + batch_size]


def batches(dataset: ImageDataset, batch_size: int, seed, drop_last: bool = True) -> Iterator[np.ndarray]:
    for idx in batch_indices(len(dataset), batch_size, seed, drop_last):
        yield dataset.images[idx]


def to_float(images: np.ndarray) -> np.ndarray:
    return images.astype(np.float32) / np.float32(255.0) if images.dtype == np.uint8 else images


def channel_stats(dataset: ImageDataset, chunk: int = 1024) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean and std over all pixels, accumulated chunk by chunk."""
    total = np.zeros(3)
    squares = np.zeros(3)
    count = 0
    for lo in range(0, len(dataset), chunk):
        x = np.asarray(dataset.images[lo : lo + chunk], dtype=np.float64) / 255.0
        total += x.sum(axis=(0, 2, 3))
        squares += (x * x).sum(axis=(0, 2, 3))
        count += x.size // 3
    mean = total / max(count, 1)
    std = np.sqrt(np.maximum(squares / max(count, 1) - mean * mean, 0.0))
    return tuple(round(float(m), 6) for m in mean), tuple(round(float(s), 6) for s in std)
