"""Low-level image resampling and filtering shared by tiling and augmentation.

Images are float or uint8 arrays of shape (H, W) or (H, W, C).
"""

from __future__ import annotations

import math
from functools import lru_cache

import cv2
import numpy as np
from scipy.ndimage import correlate1d


def reflect_index(i: np.ndarray, n: int) -> np.ndarray:
    """Map integer coordinates into [0, n) by half-sample symmetric reflection (``abcd|dcba``)."""
    if n == 1:
        return np.zeros_like(i)
    period = 2 * n
    i = np.mod(i, period)
    return np.where(i >= n, period - 1 - i, i)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int, box=None) -> np.ndarray:
    """Bilinear resize of ``img`` (or of the sub-window ``box=(top, left, h, w)``) to out_h x out_w.

    Pixel centers are aligned (align_corners=False); samples past the window edge
    repeat the edge pixel. Output is float32.
    """
    x = img.astype(np.float32, copy=False)
    if box is not None:
        top, left, h, w = (int(v) for v in box)
        if top < 0 or left < 0 or h < 1 or w < 1 or top + h > x.shape[0] or left + w > x.shape[1]:
            raise ValueError(f"crop box {box} outside image of shape {x.shape[:2]}")
        x = x[top:top + h, left:left + w]
    if x.shape[:2] == (out_h, out_w):
        return x.copy()
    out = cv2.resize(np.ascontiguousarray(x), (out_w, out_h), interpolation=cv2.INTER_LINEAR)
    return out.reshape((out_h, out_w) + x.shape[2:])


def _bilinear_taps(H: int, W: int, ys: np.ndarray, xs: np.ndarray):
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0).astype(np.float32)
    fx = (xs - x0).astype(np.float32)
    ya, yb = reflect_index(y0, H), reflect_index(y0 + 1, H)
    xa, xb = reflect_index(x0, W), reflect_index(x0 + 1, W)
    idx = np.stack([ya * W + xa, ya * W + xb, yb * W + xa, yb * W + xb])
    w = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx])
    return idx, w


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``img`` at fractional coordinates with reflect boundary handling."""
    H, W = img.shape[:2]
    idx, w = _bilinear_taps(H, W, ys, xs)
    return _gather(img, idx, w)


def _gather(img, idx, w):
    H, W = img.shape[:2]
    flat = img.reshape(H * W, -1).astype(np.float32, copy=False)
    taps = np.take(flat, idx, axis=0)
    out = np.einsum("k...c,k...->...c", taps, w)
    return out.reshape(idx.shape[1:] + img.shape[2:])


@lru_cache(maxsize=32)
def _rotation_taps(H: int, W: int, angle_deg: float):
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map of a clockwise rotation (y axis points down)
    src_x = c * dx + s * dy + cx
    src_y = -s * dx + c * dy + cy
    return _bilinear_taps(H, W, src_y, src_x)


def rotate_bilinear(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate clockwise about the image center, same output size, reflect padding."""
    H, W = img.shape[:2]
    idx, w = _rotation_taps(H, W, float(angle_deg))
    return _gather(img, idx, w)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3 sigma), half-sample reflect padding."""
    k = gaussian_kernel1d(sigma)
    radius = len(k) // 2
    if img.ndim in (2, 3) and radius < min(img.shape[:2]):
        k32 = k.astype(np.float32)
        return cv2.sepFilter2D(img.astype(np.float32, copy=False), -1, k32, k32,
                               borderType=cv2.BORDER_REFLECT)
    out = correlate1d(img.astype(np.float32, copy=False), k, axis=0, mode="reflect")
    return correlate1d(out, k, axis=1, mode="reflect")


def rgb_to_gray(img: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma."""
    img = img.astype(np.float32, copy=False)
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
