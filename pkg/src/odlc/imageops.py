"""Plain-ndarray image helpers shared by the data pipeline and the codec.

All images are float32 CHW in [0,1] unless noted. None of these record on
the autodiff tape; they run in the preprocessing stage.
"""

from __future__ import annotations

import numpy as np


def resize_smallest_side(img: np.ndarray, target: int) -> np.ndarray:
    """Aspect-preserving bilinear resize so min(H, W) == target.

    A no-op (returns the input array) when the smallest side already
    matches, so constant-resolution datasets pass through untouched.
    """
    _, h, w = img.shape
    small = min(h, w)
    if small == target:
        return img
    s = target / small
    nh = target if h == small else max(int(round(h * s)), 1)
    nw = target if w == small else max(int(round(w * s)), 1)
    return resize_bilinear(img, nh, nw)


def resize_bilinear(img: np.ndarray, nh: int, nw: int) -> np.ndarray:
    """Half-pixel-center bilinear resample of a CHW image."""
    c, h, w = img.shape
    ys = (np.arange(nh, dtype=np.float64) + 0.5) * (h / nh) - 0.5
    xs = (np.arange(nw, dtype=np.float64) + 0.5) * (w / nw) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).astype(np.float32)
    wx = np.clip(xs - x0, 0.0, 1.0).astype(np.float32)
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return (top * (1 - wy)[None, :, None] + bot * wy[None, :, None]).astype(np.float32)


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    _, h, w = img.shape
    if h < size or w < size:
        raise ValueError(f"center_crop: image {h}x{w} smaller than crop {size}")
    top = (h - size) // 2
    left = (w - size) // 2
    return img[:, top : top + size, left : left + size]


def random_crop(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    if h < size or w < size:
        raise ValueError(f"random_crop: image {h}x{w} smaller than crop {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return img[:, top : top + size, left : left + size]


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def normalize(img: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return ((img - mean[:, None, None]) / std[:, None, None]).astype(np.float32)


def denormalize(img: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (img * std[:, None, None] + mean[:, None, None]).astype(np.float32)


def pad_to_multiple(img: np.ndarray, multiple: int) -> np.ndarray:
    """Pad bottom/right so both spatial dims are multiples of `multiple`.

    Reflect padding where the pad fits (< dim), edge replication otherwise
    so tiny inputs stay handled.
    """
    _, h, w = img.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return img
    out = img
    if ph:
        mode = "reflect" if ph < h else "edge"
        out = np.pad(out, ((0, 0), (0, ph), (0, 0)), mode=mode)
    if pw:
        mode = "reflect" if pw < w else "edge"
        out = np.pad(out, ((0, 0), (0, 0), (0, pw)), mode=mode)
    return out


def channel_stats(images) -> tuple:
    """Per-channel mean/std over an iterable of CHW [0,1] images."""
    s = np.zeros(3, dtype=np.float64)
    s2 = np.zeros(3, dtype=np.float64)
    n = 0
    for img in images:
        s += img.sum(axis=(1, 2))
        s2 += np.square(img, dtype=np.float64).sum(axis=(1, 2))
        n += img.shape[1] * img.shape[2]
    if n == 0:
        raise ValueError("channel_stats: no images")
    mean = s / n
    var = np.maximum(s2 / n - mean * mean, 1e-8)
    return mean.astype(np.float32), np.sqrt(var).astype(np.float32)
