"""PNG IO and small image utilities (bilinear sampling, Gaussian blur).

Images are float arrays in [0, 1], shape [h, w, 3] (or [h, w] for masks).
PNG values are treated linearly (no sRGB transfer on either side).
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def save_png(path, rgb: np.ndarray, alpha: np.ndarray | None = None) -> None:
    arr = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    if alpha is not None:
        a = (np.clip(alpha, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
        data = np.concatenate([data, a[..., None]], axis=2)
        Image.fromarray(data, mode="RGBA").save(path)
    else:
        Image.fromarray(data, mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        return arr
    return arr[..., :3]


def load_mask_png(path) -> np.ndarray:
    """Boolean mask: any channel above half intensity counts as selected."""
    arr = load_png(path)
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    return arr > 0.5


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample image at fractional pixel coordinates, edge-clamped.

    ``ys``/``xs`` are arrays of row/column positions in pixel units
    (0 .. h-1 / 0 .. w-1); output shape is ys.shape + channel dims.
    """
    h, w = img.shape[:2]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[..., None] if img.ndim == 3 else ys - y0
    fx = (xs - x0)[..., None] if img.ndim == 3 else xs - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(img, gy, gx)


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Normalized kernel truncated at three sigma (sums to one)."""
    if sigma <= 0:
        return np.ones(1)
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding (constants stay fixed)."""
    if sigma <= 0:
        return img
    k = gaussian_kernel_1d(sigma)
    r = (len(k) - 1) // 2

    def conv_axis(a: np.ndarray, axis: int) -> np.ndarray:
        pad = [(0, 0)] * a.ndim
        pad[axis] = (r, r)
        ap = np.pad(a, pad, mode="reflect")
        out = np.zeros_like(a, dtype=np.float64)
        sl = [slice(None)] * a.ndim
        for i, kv in enumerate(k):
            sl[axis] = slice(i, i + a.shape[axis])
            out += kv * ap[tuple(sl)]
        return out

    return conv_axis(conv_axis(img.astype(np.float64), 0), 1).astype(img.dtype)
