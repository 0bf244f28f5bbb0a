"""Stochastic view generation.

Each pipeline applies, in order: random resized crop, horizontal flip,
color jitter (brightness, contrast, saturation), grayscale, Gaussian blur.
Everything is vectorized over the batch and driven by one numpy Generator,
so identical seeds give identical views. Pixel values stay in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import to_float

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class AugmentConfig:
    size: int = 32
    crop_scale: tuple[float, float] = (0.08, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    gray_p: float = 0.2
    blur_p: float = 1.0
    blur_kernel: int = 3
    blur_sigma: tuple[float, float] = (0.1, 2.0)

    def __post_init__(self):
        self.crop_scale = tuple(float(v) for v in self.crop_scale)
        self.crop_ratio = tuple(float(v) for v in self.crop_ratio)
        self.blur_sigma = tuple(float(v) for v in self.blur_sigma)
        if self.blur_kernel % 2 == 0 or self.blur_kernel < 1:
            raise ValueError("blur kernel must be odd and positive")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0 or self.crop_ratio[0] > self.crop_ratio[1]:
            raise ValueError("crop scale must satisfy 0 < lo <= hi <= 1 and ratio lo <= hi")
        for name in ("flip_p", "jitter_p", "gray_p", "blur_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")


def default_pipelines(size: int = 32) -> tuple[AugmentConfig, AugmentConfig]:
    """The two asymmetric pipelines: blur always in the first, rarely in the second."""
    return AugmentConfig(size=size, blur_p=1.0), AugmentConfig(size=size, blur_p=0.1)


def identity_pipeline(size: int) -> AugmentConfig:
    return AugmentConfig(
        size=size, crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), flip_p=0.0, jitter_p=0.0, gray_p=0.0, blur_p=0.0
    )


def _crop_boxes(rng, n: int, h: int, w: int, cfg: AugmentConfig, attempts: int = 10) -> np.ndarray:
    """(n, 4) boxes (top, left, height, width) in continuous pixel units."""
    area = h * w
    lo, hi = cfg.crop_scale
    scale = rng.uniform(lo, hi, (n, attempts)) * area
    log_r = np.log(cfg.crop_ratio)
    ratio = np.exp(rng.uniform(log_r[0], log_r[1], (n, attempts)))
    cw = np.sqrt(scale * ratio)
    ch = np.sqrt(scale / ratio)
    ok = (cw <= w) & (ch <= h)
    first = np.argmax(ok, axis=1)
    any_ok = ok.any(axis=1)
    rows = np.arange(n)
    ch = np.where(any_ok, ch[rows, first], h)
    cw = np.where(any_ok, cw[rows, first], w)
    u = rng.random((n, 2))
    top = u[:, 0] * (h - ch)
    left = u[:, 1] * (w - cw)
    return np.stack([top, left, ch, cw], axis=1)


def _resample(x: np.ndarray, boxes: np.ndarray, size: int) -> np.ndarray:
    """Bilinear sampling of each box onto a size x size grid (pixel centers)."""
    n, c, h, w = x.shape
    t = (np.arange(size) + 0.5)[None]
    ys = boxes[:, 0:1] + t * boxes[:, 2:3] / size - 0.5
    xs = boxes[:, 1:2] + t * boxes[:, 3:4] / size - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(x.dtype)[:, None, :, None]
    wx = (xs - x0).astype(x.dtype)[:, None, None, :]
    # gather from the flattened array: plane offset + row offset + column
    flat = np.ascontiguousarray(x).reshape(-1)
    plane = ((np.arange(n)[:, None] * c + np.arange(c)) * (h * w))[:, :, None, None]
    r0, r1 = plane + (y0 * w)[:, None, :, None], plane + (y1 * w)[:, None, :, None]
    c0, c1 = x0[:, None, None, :], x1[:, None, None, :]
    top = flat[r0 + c0] * (1 - wx) + flat[r0 + c1] * wx
    bottom = flat[r1 + c0] * (1 - wx) + flat[r1 + c1] * wx
    return top * (1 - wy) + bottom * wy


def resize(images: np.ndarray, size: int) -> np.ndarray:
    x = to_float(images)
    n, _, h, w = x.shape
    if h == size and w == size:
        return x
    boxes = np.tile(np.array([0.0, 0.0, h, w]), (n, 1))
    return _resample(x, boxes, size)


def _gray(x: np.ndarray) -> np.ndarray:
    return np.einsum("nchw,c->nhw", x, LUMA.astype(x.dtype))[:, None]


def _blend(a: np.ndarray, b: np.ndarray, factor: np.ndarray) -> np.ndarray:
    return np.clip(b + (a - b) * factor[:, None, None, None], 0.0, 1.0)


def _gaussian_blur(x: np.ndarray, sigma: np.ndarray, kernel: int) -> np.ndarray:
    r = kernel // 2
    offs = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (offs[None] / sigma[:, None]) ** 2)
    k = (k / k.sum(axis=1, keepdims=True)).astype(x.dtype)
    kh = k[:, None, :, None, None]
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (0, 0)), mode="reflect")
    h, w = x.shape[2:]
    x = sum(kh[:, :, j] * xp[:, :, j : j + h, :] for j in range(kernel))
    xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (r, r)), mode="reflect")
    return sum(kh[:, :, j] * xp[:, :, :, j : j + w] for j in range(kernel))


def augment_batch(images: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """One stochastic view of every image in an (N, 3, H, W) batch."""
    x = to_float(images)
    n, _, h, w = x.shape
    x = _resample(x, _crop_boxes(rng, n, h, w, cfg), cfg.size)

    flip = rng.random(n) < cfg.flip_p
    if flip.any():
        x[flip] = x[flip][..., ::-1]

    jitter = rng.random(n) < cfg.jitter_p
    factors = [rng.uniform(max(0.0, 1 - s), 1 + s, n) for s in (cfg.brightness, cfg.contrast, cfg.saturation)]
    if jitter.any():
        one = np.ones(n)
        b, c, s = (np.where(jitter, f, one).astype(x.dtype) for f in factors)
        x = np.clip(x * b[:, None, None, None], 0.0, 1.0)
        mean = _gray(x).mean(axis=(1, 2, 3), keepdims=True)
        x = _blend(x, np.broadcast_to(mean, x.shape), c)
        x = _blend(x, np.broadcast_to(_gray(x), x.shape), s)

    gray = rng.random(n) < cfg.gray_p
    if gray.any():
        x[gray] = np.repeat(_gray(x[gray]), 3, axis=1)

    blur = rng.random(n) < cfg.blur_p
    sigma = rng.uniform(cfg.blur_sigma[0], cfg.blur_sigma[1], n)
    if blur.any() and cfg.blur_kernel > 1:
        x[blur] = _gaussian_blur(x[blur], sigma[blur], cfg.blur_kernel)

    return np.clip(x, 0.0, 1.0)


def make_views(
    x: np.ndarray,
    seed,
    t: AugmentConfig | None = None,
    t_prime: AugmentConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Two independently augmented views of one (3, H, W) image or a batch."""
    single = x.ndim == 3
    batch = x[None] if single else x
    if t is None or t_prime is None:
        d1, d2 = default_pipelines(batch.shape[-1])
        t, t_prime = t or d1, t_prime or d2
    rng = np.random.default_rng(seed)
    v = augment_batch(batch, t, rng)
    v_prime = augment_batch(batch, t_prime, rng)
    return (v[0], v_prime[0]) if single else (v, v_prime)


def normalize(x: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, dtype=x.dtype).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=x.dtype).reshape(1, -1, 1, 1)
    return (x - m) / s

