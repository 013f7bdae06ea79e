"""Two-view stochastic augmentation for contrastive pretraining.

The stack runs in a fixed order: rotate, vertical flip, horizontal flip, random
resized crop, colour jitter, grayscale, Gaussian blur. Every random draw is cast
to float32 and logged, so a view can be rebuilt bit-exactly from its log.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field, fields

import cv2
import numpy as np

from .imaging import gaussian_blur as _blur
from .imaging import resize_bilinear, rgb_to_gray, rotate_bilinear

__all__ = [
    "AugmentationConfig",
    "AugmentError",
    "ViewPair",
    "Augmenter",
    "rotate_discrete",
    "flip",
    "random_resized_crop",
    "crop_resize",
    "color_jitter",
    "adjust_color",
    "grayscale",
    "gaussian_blur",
    "encode_log",
    "decode_log",
    "replay",
    "OP_ROTATE",
    "OP_VFLIP",
    "OP_HFLIP",
    "OP_CROP",
    "OP_JITTER",
    "OP_GRAYSCALE",
    "OP_BLUR",
]


class AugmentError(ValueError):
    pass


TABLE_ANGLES = (90.0, 170.0, 280.0)
RIGHT_ANGLES = (90.0, 180.0, 270.0)

OP_ROTATE, OP_VFLIP, OP_HFLIP, OP_CROP, OP_JITTER, OP_GRAYSCALE, OP_BLUR = range(1, 8)
# number of float32 values stored after each op id in the replay log
OP_ARITY = {OP_ROTATE: 1, OP_VFLIP: 1, OP_HFLIP: 1, OP_CROP: 4, OP_JITTER: 5, OP_GRAYSCALE: 1, OP_BLUR: 1}


@dataclass
class AugmentationConfig:
    rotate_mode: str = "table"  # "table" -> {90,170,280}, "right_angles" -> {90,180,270}
    p_vflip: float = 0.5
    p_hflip: float = 0.5
    crop_scale_range: tuple = (0.2, 1.0)
    crop_ratio_range: tuple = (3 / 4, 4 / 3)
    brightness: float = 0.8
    contrast: float = 0.8
    saturation: float = 0.8
    hue: float = 0.2
    p_jitter: float = 0.8
    p_grayscale: float = 0.2
    blur_sigma_range: tuple = (0.1, 2.0)
    p_blur: float = 0.5
    output_size: int = 224
    rotate_angles: tuple = field(default=())

    def __post_init__(self):
        if not self.rotate_angles:
            if self.rotate_mode == "table":
                self.rotate_angles = TABLE_ANGLES
            elif self.rotate_mode == "right_angles":
                self.rotate_angles = RIGHT_ANGLES
            else:
                raise AugmentError(f"unknown rotate_mode {self.rotate_mode!r}")
        self.rotate_angles = tuple(float(a) for a in self.rotate_angles)
        self.crop_scale_range = tuple(float(v) for v in self.crop_scale_range)
        self.crop_ratio_range = tuple(float(v) for v in self.crop_ratio_range)
        self.blur_sigma_range = tuple(float(v) for v in self.blur_sigma_range)
        self.validate()

    def validate(self) -> None:
        for name in ("p_vflip", "p_hflip", "p_jitter", "p_grayscale", "p_blur"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise AugmentError(f"{name}={p} outside [0, 1]")
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise AugmentError(f"bad crop_scale_range {self.crop_scale_range}")
        if not 0.0 < self.crop_ratio_range[0] <= self.crop_ratio_range[1]:
            raise AugmentError(f"bad crop_ratio_range {self.crop_ratio_range}")
        lo, hi = self.blur_sigma_range
        if not 0.0 < lo <= hi:
            raise AugmentError(f"bad blur_sigma_range {self.blur_sigma_range}")
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise AugmentError(f"{name} must be non-negative")
        if not 0.0 <= self.hue <= 0.5:
            raise AugmentError("hue must be in [0, 0.5]")
        if len(self.rotate_angles) * 0.25 > 1.0:
            raise AugmentError("at most 4 rotation angles (each drawn with probability 1/4)")
        if self.output_size < 1:
            raise AugmentError("output_size must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise AugmentError(f"unknown augment keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class ViewPair:
    query_view: np.ndarray
    key_view: np.ndarray
    tile_id: object = None
    query_log: list = field(default_factory=list)
    key_log: list = field(default_factory=list)


def _f32(x) -> float:
    return float(np.float32(x))


def _as_float_image(tile: np.ndarray) -> np.ndarray:
    tile = np.asarray(tile)
    if tile.ndim != 3 or tile.shape[2] != 3:
        raise AugmentError(f"expected an HxWx3 tile, got shape {tile.shape}")
    if tile.dtype == np.uint8:
        return tile.astype(np.float32) / np.float32(255.0)
    return tile.astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# individual transforms


def rotate_discrete(tile: np.ndarray, angle: float, allowed=None) -> np.ndarray:
    """Clockwise rotation. Multiples of 90 degrees are exact pixel permutations."""
    angle = float(angle)
    if allowed is not None and angle not in {float(a) for a in allowed} and angle != 0.0:
        raise AugmentError(f"rotation angle {angle} not in {sorted(allowed)}")
    q, r = divmod(angle, 90.0)
    if r == 0.0:
        return np.rot90(tile, k=-int(q) % 4, axes=(0, 1)).copy()
    return rotate_bilinear(tile, angle)


def flip(tile: np.ndarray, axis: str) -> np.ndarray:
    """``axis='v'`` flips top-bottom, ``'h'`` flips left-right."""
    if axis == "v":
        return tile[::-1].copy()
    if axis == "h":
        return tile[:, ::-1].copy()
    raise AugmentError(f"flip axis must be 'v' or 'h', got {axis!r}")


def random_resized_crop(shape, rng: np.random.Generator, scale=(0.2, 1.0), ratio=(3 / 4, 4 / 3)):
    """Draw an integer crop box (top, left, h, w) on an image of ``shape``.

    Area fraction is uniform in ``scale`` and log-aspect uniform in ``ratio``;
    draws that do not fit are retried up to 10 times before a center crop.
    """
    H, W = shape[:2]
    area = H * W
    log_lo, log_hi = math.log(ratio[0]), math.log(ratio[1])
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        # rounding can push the box just outside the requested ranges; redraw then
        if (0 < w <= W and 0 < h <= H and scale[0] * area <= w * h <= scale[1] * area
                and ratio[0] <= w / h <= ratio[1]):
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return top, left, h, w
    in_ratio = W / H
    if in_ratio < ratio[0]:
        w, h = W, int(round(W / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = H, int(round(H * ratio[1]))
    else:
        h, w = H, W
    return (H - h) // 2, (W - w) // 2, h, w


def crop_resize(tile: np.ndarray, box, size: int) -> np.ndarray:
    top, left, h, w = (int(v) for v in box)
    return resize_bilinear(tile, size, size, box=(top, left, h, w))


def _blend(a: np.ndarray, b, factor: float) -> np.ndarray:
    return np.clip(factor * a + (1.0 - factor) * b, 0.0, 1.0).astype(np.float32)


def adjust_color(tile: np.ndarray, brightness=1.0, contrast=1.0, saturation=1.0, hue=0.0) -> np.ndarray:
    """Apply brightness, contrast, saturation, hue in that order; clamp after each."""
    x = tile.astype(np.float32, copy=False)
    if brightness != 1.0:
        x = np.clip(x * np.float32(brightness), 0.0, 1.0)
    if contrast != 1.0:
        m = rgb_to_gray(x).mean()
        x = _blend(x, m, np.float32(contrast))
    if saturation != 1.0:
        g = rgb_to_gray(x)[..., None]
        x = _blend(x, g, np.float32(saturation))
    if hue != 0.0:
        # OpenCV keeps float hue in degrees
        hsv = cv2.cvtColor(np.ascontiguousarray(x, dtype=np.float32), cv2.COLOR_RGB2HSV)
        hsv[..., 0] = np.mod(hsv[..., 0] + np.float32(360.0 * hue), np.float32(360.0))
        x = np.clip(cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB), 0.0, 1.0)
    return x


def color_jitter(tile: np.ndarray, rng: np.random.Generator, brightness=0.8, contrast=0.8,
                 saturation=0.8, hue=0.2):
    """Random colour jitter; returns (image, (b, c, s, h)) with factors as float32."""
    b = _f32(rng.uniform(max(0.0, 1 - brightness), 1 + brightness))
    c = _f32(rng.uniform(max(0.0, 1 - contrast), 1 + contrast))
    s = _f32(rng.uniform(max(0.0, 1 - saturation), 1 + saturation))
    h = _f32(rng.uniform(-hue, hue))
    return adjust_color(tile, b, c, s, h), (b, c, s, h)


def grayscale(tile: np.ndarray) -> np.ndarray:
    g = np.clip(rgb_to_gray(tile), 0.0, 1.0)
    return np.repeat(g[..., None], 3, axis=2).astype(np.float32)


def gaussian_blur(tile: np.ndarray, sigma: float, sigma_range=None) -> np.ndarray:
    if sigma_range is not None and not sigma_range[0] <= sigma <= sigma_range[1]:
        raise AugmentError(f"sigma {sigma} outside {sigma_range}")
    if sigma <= 0:
        raise AugmentError("sigma must be positive")
    return np.clip(_blur(tile, sigma), 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# replay log


def encode_log(records) -> bytes:
    """Binary record stream: u8 op id, then that op's float32 draws (little-endian)."""
    out = bytearray()
    for op, values in records:
        n = OP_ARITY.get(op)
        if n is None or len(values) != n:
            raise AugmentError(f"bad log record {(op, values)}")
        out += struct.pack(f"<B{n}f", op, *values)
    return bytes(out)


def decode_log(blob: bytes) -> list:
    records, pos = [], 0
    while pos < len(blob):
        op = blob[pos]
        n = OP_ARITY.get(op)
        if n is None:
            raise AugmentError(f"unknown op id {op} at byte {pos}")
        end = pos + 1 + 4 * n
        if end > len(blob):
            raise AugmentError("truncated replay log")
        records.append((op, tuple(struct.unpack_from(f"<{n}f", blob, pos + 1))))
        pos = end
    return records


def _apply(x: np.ndarray, op: int, v, size: int) -> np.ndarray:
    if op == OP_ROTATE:
        return x if v[0] == 0.0 else rotate_discrete(x, v[0])
    if op == OP_VFLIP:
        return flip(x, "v") if v[0] else x
    if op == OP_HFLIP:
        return flip(x, "h") if v[0] else x
    if op == OP_CROP:
        return crop_resize(x, v, size)
    if op == OP_JITTER:
        return adjust_color(x, *v[1:]) if v[0] else x
    if op == OP_GRAYSCALE:
        return grayscale(x) if v[0] else x
    if op == OP_BLUR:
        return gaussian_blur(x, v[0]) if v[0] > 0 else x
    raise AugmentError(f"unknown op id {op}")


def replay(tile: np.ndarray, records, output_size: int = 224) -> np.ndarray:
    """Rebuild a view from its log without touching any random stream."""
    x = _as_float_image(tile)
    for op, v in records:
        x = _apply(x, op, tuple(_f32(a) for a in v), output_size)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------


class Augmenter:
    """Draws views through the full stack and keeps a replayable log of every draw."""

    def __init__(self, config: AugmentationConfig | None = None):
        self.config = config or AugmentationConfig()

    def draw(self, shape, rng: np.random.Generator) -> list:
        """Sample the parameter log for one view of an image with ``shape``."""
        cfg = self.config
        recs = []
        u = rng.random()
        k = int(u // 0.25)
        angle = cfg.rotate_angles[k] if k < len(cfg.rotate_angles) else 0.0
        recs.append((OP_ROTATE, (_f32(angle),)))
        recs.append((OP_VFLIP, (float(rng.random() < cfg.p_vflip),)))
        recs.append((OP_HFLIP, (float(rng.random() < cfg.p_hflip),)))
        if angle % 180.0 == 90.0:
            shape = (shape[1], shape[0])
        box = random_resized_crop(shape, rng, cfg.crop_scale_range, cfg.crop_ratio_range)
        recs.append((OP_CROP, tuple(float(b) for b in box)))
        if rng.random() < cfg.p_jitter:
            b = _f32(rng.uniform(max(0.0, 1 - cfg.brightness), 1 + cfg.brightness))
            c = _f32(rng.uniform(max(0.0, 1 - cfg.contrast), 1 + cfg.contrast))
            s = _f32(rng.uniform(max(0.0, 1 - cfg.saturation), 1 + cfg.saturation))
            h = _f32(rng.uniform(-cfg.hue, cfg.hue))
            recs.append((OP_JITTER, (1.0, b, c, s, h)))
        else:
            recs.append((OP_JITTER, (0.0, 1.0, 1.0, 1.0, 0.0)))
        recs.append((OP_GRAYSCALE, (float(rng.random() < cfg.p_grayscale),)))
        if rng.random() < cfg.p_blur:
            recs.append((OP_BLUR, (_f32(rng.uniform(*cfg.blur_sigma_range)),)))
        else:
            recs.append((OP_BLUR, (0.0,)))
        return recs

    def view(self, tile: np.ndarray, rng: np.random.Generator):
        """One augmented view and its log."""
        x = _as_float_image(tile)
        recs = self.draw(x.shape, rng)
        return replay(x, recs, self.config.output_size), recs

    def two_views(self, tile: np.ndarray, rng: np.random.Generator, tile_id=None) -> ViewPair:
        x = _as_float_image(tile)
        rq, rk = rng.spawn(2)
        q, lq = self.view(x, rq)
        k, lk = self.view(x, rk)
        return ViewPair(q, k, tile_id, lq, lk)

    def batch(self, tiles, rng: np.random.Generator):
        """Query and key batches (B, S, S, 3) for a stack of tiles."""
        s = self.config.output_size
        n = len(tiles)
        q = np.empty((n, s, s, 3), dtype=np.float32)
        k = np.empty_like(q)
        for i, r in enumerate(rng.spawn(n)):
            pair = self.two_views(tiles[i], r)
            q[i], k[i] = pair.query_view, pair.key_view
        return q, k
