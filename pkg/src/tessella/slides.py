"""Synthetic whole-slide rasters, tissue detection, and fixed-grid tiling.

Slides are rendered with a Beer-Lambert two-stain model: per-pixel hematoxylin
and eosin concentrations are mapped to RGB through slide-specific stain vectors,
so stain colour varies strongly between slides while tissue morphology does not.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.filters import threshold_otsu

from .imaging import resize_bilinear, rgb_to_gray

logger = logging.getLogger(__name__)

TILE_SIZE = 224
TARGET_MPP = 0.5
MAX_TILES = 10_000

BACKGROUND, TISSUE, LESION = 0, 1, 2

# Ruifrok & Johnston optical-density vectors
_H_VEC = np.array([0.650, 0.704, 0.286])
_E_VEC = np.array([0.072, 0.990, 0.105])


class SlideError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSlideSpec:
    width: int
    height: int
    microns_per_pixel: float = TARGET_MPP
    tissue_fraction: float = 0.8
    lesion_present: bool = False
    lesion_fraction_of_tissue: float = 0.0
    texture_seed: int = 0

    def validate(self) -> None:
        if self.width < 2 * TILE_SIZE or self.height < 2 * TILE_SIZE:
            raise SlideError(f"slide must be at least {2 * TILE_SIZE}x{2 * TILE_SIZE}, got {self.width}x{self.height}")
        if not 0 <= self.tissue_fraction <= 1 or not 0 <= self.lesion_fraction_of_tissue <= 1:
            raise SlideError("fractions must lie in [0, 1]")
        if self.lesion_present != (self.lesion_fraction_of_tissue > 0):
            raise SlideError("lesion_fraction_of_tissue > 0 iff lesion_present")


@dataclass
class SlideRaster:
    pixels: np.ndarray  # (H, W, 3) uint8
    microns_per_pixel: float = TARGET_MPP
    mask: np.ndarray | None = None  # (H, W) uint8 in {BACKGROUND, TISSUE, LESION}
    slide_id: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise SlideError(f"raster must be (H, W, 3), got {self.pixels.shape}")
        if self.mask is not None and self.mask.shape != self.pixels.shape[:2]:
            raise SlideError(f"mask shape {self.mask.shape} does not match raster {self.pixels.shape[:2]}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class TileRef:
    row: int
    col: int
    x: int
    y: int
    tissue_fraction: float
    lesion_fraction: float = 0.0


@dataclass
class TileGrid:
    tiles: list[TileRef]
    tile_size: int = TILE_SIZE
    stride: int = TILE_SIZE
    slide_id: str = ""
    raster_shape: tuple[int, int] = (0, 0)

    def __len__(self) -> int:
        return len(self.tiles)

    def coords(self) -> np.ndarray:
        """(N, 4) uint32 table of row, col, x, y."""
        return np.array([(t.row, t.col, t.x, t.y) for t in self.tiles], dtype=np.uint32).reshape(-1, 4)

    def lesion_fractions(self) -> np.ndarray:
        return np.array([t.lesion_fraction for t in self.tiles], dtype=np.float64)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.raster_shape[0] // self.stride, self.raster_shape[1] // self.stride


@dataclass
class TissueMask:
    mask: np.ndarray  # bool, at raster resolution divided by `downsample`
    downsample: int = 1


# -- procedural rendering ----------------------------------------------------------------------

def _smooth_field(rng: np.random.Generator, h: int, w: int, cell: int, octaves: int = 2) -> np.ndarray:
    """Band-limited noise in roughly [-1, 1] with feature size ~``cell`` pixels."""
    out = np.zeros((h, w), dtype=np.float32)
    amp, total = 1.0, 0.0
    for o in range(octaves):
        c = max(cell >> o, 2)
        gh, gw = h // c + 3, w // c + 3
        coarse = rng.standard_normal((gh, gw)).astype(np.float32)
        coarse = ndimage.gaussian_filter(coarse, 0.8, mode="reflect")
        up = resize_bilinear(coarse, gh * c, gw * c)[c:c + h, c:c + w]
        out += amp * up
        total += amp
        amp *= 0.5
    out /= total
    return out / max(float(np.abs(out).max()), 1e-6)


def _quantile_threshold(field: np.ndarray, fraction: float, within: np.ndarray | None = None) -> np.ndarray:
    if fraction <= 0:
        return np.zeros(field.shape, dtype=bool)
    vals = field[within] if within is not None else field.reshape(-1)
    if vals.size == 0:
        return np.zeros(field.shape, dtype=bool)
    if fraction >= 1:
        return np.ones(field.shape, dtype=bool) if within is None else within.copy()
    t = np.quantile(vals[:: max(1, vals.size // 400_000)], 1 - fraction)
    sel = field > t
    return sel if within is None else sel & within


def _disk_sprite(radius: float, ring: bool, rng: np.random.Generator, elong: float = 1.0) -> np.ndarray:
    r = int(np.ceil(radius * max(elong, 1.0))) + 1
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float32)
    ang = rng.uniform(0, np.pi)
    c, s = np.cos(ang), np.sin(ang)
    u = (c * xx + s * yy) / elong
    v = -s * xx + c * yy
    d = np.sqrt(u * u + v * v) / radius
    body = np.clip((1.0 - d) * radius, 0, 1)  # ~1 px anti-aliased edge
    if not ring:
        return body
    rim = np.clip(1.0 - np.abs(d - 0.85) * radius / 1.5, 0, 1)
    nucleolus = np.clip(1.2 - np.hypot(u - radius * 0.15, v) / 1.3, 0, 1)
    return 0.35 * body + 0.75 * rim + 0.8 * nucleolus


def _stamp_indices(shape: tuple[int, int], centers_y: np.ndarray, centers_x: np.ndarray,
                   sprites: list[np.ndarray], gain: float, rng: np.random.Generator):
    """Flat pixel indices and weights of sprites placed at integer centers (clipped at the border)."""
    H, W = shape
    which = rng.integers(0, len(sprites), size=centers_y.size)
    idx, wts = [], []
    for k, sp in enumerate(sprites):
        sel = which == k
        if not sel.any():
            continue
        r = sp.shape[0] // 2
        dy, dx = np.nonzero(sp > 0)
        w = (gain * sp[dy, dx]).astype(np.float32)
        yy = centers_y[sel][:, None] + (dy - r)[None, :]
        xx = centers_x[sel][:, None] + (dx - r)[None, :]
        ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        idx.append((yy * W + xx)[ok])
        wts.append(np.broadcast_to(w, yy.shape)[ok])
    return idx, wts


def _poisson_points(rng: np.random.Generator, region: np.ndarray, per_pixel: float):
    H, W = region.shape
    n = rng.poisson(per_pixel * H * W)
    ys = rng.integers(0, H, size=n)
    xs = rng.integers(0, W, size=n)
    keep = region[ys, xs]
    return ys[keep], xs[keep]


def generate_synthetic_slide(spec: SyntheticSlideSpec, seed: int, slide_id: str = "") -> SlideRaster:
    """Render a slide with background, normal tissue, and (optionally) a lesion.

    Normal tissue mixes fibrous eosin-rich stroma with lymphoid regions packed
    with small dark round nuclei. Lesions carry large vesicular nuclei (dark rim,
    pale interior, nucleolus) in sheets. Everything is a function of (spec, seed).
    """
    spec.validate()
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(spec.texture_seed) & 0xFFFFFFFFFFFFFFFF])
    geo_rng, tex_rng, stain_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    H, W = spec.height, spec.width
    f32 = np.float32

    # geometry --------------------------------------------------------------
    tissue_field = _smooth_field(geo_rng, H, W, cell=max(min(H, W) // 3, 64), octaves=3)
    # bias towards a central blob so tissue is one piece rather than confetti
    yy = np.linspace(-1, 1, H, dtype=f32)[:, None]
    xx = np.linspace(-1, 1, W, dtype=f32)[None, :]
    tissue_field -= 0.6 * (yy * yy + xx * xx)
    tissue = _quantile_threshold(tissue_field, spec.tissue_fraction)
    del tissue_field
    lesion = np.zeros((H, W), dtype=bool)
    if spec.lesion_present and tissue.any():
        lesion_field = _smooth_field(geo_rng, H, W, cell=max(min(H, W) // 6, 48), octaves=2)
        lesion = _quantile_threshold(lesion_field, spec.lesion_fraction_of_tissue, within=tissue)
        del lesion_field
    lymph_field = _smooth_field(geo_rng, H, W, cell=max(min(H, W) // 8, 48), octaves=2)
    lymphoid = _quantile_threshold(lymph_field, geo_rng.uniform(0.3, 0.6))
    del lymph_field
    lymphoid &= tissue
    lymphoid &= ~lesion
    stroma = tissue & ~lesion & ~lymphoid

    # concentrations -----------------------------------------------------------
    fib_angle = tex_rng.uniform(0, np.pi)
    freq = tex_rng.uniform(0.25, 0.4)
    eosin = _smooth_field(tex_rng, H, W, cell=24, octaves=2)
    eosin *= 6.0
    eosin += (f32(np.cos(fib_angle) * freq * W / 2) * xx + f32(np.sin(fib_angle) * freq * H / 2) * yy)
    np.sin(eosin, out=eosin)
    eosin *= 0.175
    eosin += 0.625  # stroma: 0.45 + 0.35 * (0.5 + 0.5 sin)
    eosin[~stroma] = 0.0
    eosin[lymphoid] = 0.30
    eosin[lesion] = 0.32

    idx, wts = [], []
    for region, rate, sprites, gain in (
        (stroma, 1 / 900, [_disk_sprite(2.2, False, tex_rng, elong=2.2) for _ in range(6)], 0.9),
        (lymphoid, 1 / 32, [_disk_sprite(r, False, tex_rng) for r in (2.6, 3.0, 3.4)], 1.25),
        (lesion, 1 / 190, [_disk_sprite(tex_rng.uniform(5.5, 8.0), True, tex_rng, elong=tex_rng.uniform(1.0, 1.5))
                           for _ in range(12)], 1.0),
    ):
        if region.any():
            ys, xs = _poisson_points(tex_rng, region, rate)
            i, w = _stamp_indices((H, W), ys, xs, sprites, gain, tex_rng)
            idx += i
            wts += w
    hema = np.bincount(np.concatenate(idx), weights=np.concatenate(wts), minlength=H * W) if idx \
        else np.zeros(H * W)
    hema = hema.astype(f32).reshape(H, W)
    np.minimum(hema, 1.6, out=hema)
    hema[tissue] += 0.04

    # stain model -----------------------------------------------------------------
    h_vec = np.abs(_H_VEC + stain_rng.normal(0, 0.10, 3))
    e_vec = np.abs(_E_VEC + stain_rng.normal(0, 0.10, 3))
    h_vec /= np.linalg.norm(h_vec)
    e_vec /= np.linalg.norm(e_vec)
    h_scale = stain_rng.uniform(0.65, 1.35)
    e_scale = stain_rng.uniform(0.7, 1.3)
    illum = _smooth_field(stain_rng, H, W, cell=max(min(H, W) // 4, 64), octaves=1)
    illum *= 0.12
    illum += 1.0
    hema *= illum
    eosin *= illum
    del illum
    grain = tex_rng.standard_normal((H, W), dtype=f32)
    grain *= 0.015
    bg = ~tissue
    bg_noise = tex_rng.standard_normal(int(bg.sum()), dtype=f32) * f32(2.5)
    pixels = np.empty((H, W, 3), dtype=np.uint8)
    ch = np.empty((H, W), dtype=f32)
    for c, base in enumerate((242.0, 240.0, 244.0)):
        np.multiply(hema, f32(h_scale * h_vec[c]), out=ch)
        ch += eosin * f32(e_scale * e_vec[c])
        ch += grain
        np.negative(ch, out=ch)
        np.exp(ch, out=ch)
        ch *= 250.0
        ch[bg] = base + bg_noise
        np.rint(ch, out=ch)
        np.clip(ch, 0, 255, out=ch)
        pixels[..., c] = ch
    mask = tissue.astype(np.uint8)
    mask[lesion] = LESION
    return SlideRaster(pixels=pixels, microns_per_pixel=spec.microns_per_pixel, mask=mask, slide_id=slide_id)


def generate_nonhistology_tiles(n: int, seed: int, size: int = TILE_SIZE) -> np.ndarray:
    """Out-of-domain textures (colour gratings, checkerboards, smooth gradients, shapes), uint8 (n, size, size, 3)."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, size, size, 3), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    for i in range(n):
        kind = i % 4
        c1, c2 = rng.uniform(0, 255, 3), rng.uniform(0, 255, 3)
        if kind == 0:
            ang, f = rng.uniform(0, np.pi), rng.uniform(0.03, 0.3)
            t = 0.5 + 0.5 * np.sin((np.cos(ang) * xx + np.sin(ang) * yy) * f + rng.uniform(0, 6.3))
        elif kind == 1:
            p = int(rng.integers(6, 40))
            t = (((yy // p) + (xx // p)) % 2).astype(np.float32)
        elif kind == 2:
            ang = rng.uniform(0, 2 * np.pi)
            t = (np.cos(ang) * xx + np.sin(ang) * yy) / size
            t = (t - t.min()) / max(float(np.ptp(t)), 1e-6)
        else:
            t = np.zeros((size, size), dtype=np.float32)
            for _ in range(int(rng.integers(3, 9))):
                cy, cx, r = rng.uniform(0, size, 2).tolist() + [rng.uniform(10, 50)]
                if rng.random() < 0.5:
                    t = np.maximum(t, (np.hypot(yy - cy, xx - cx) < r).astype(np.float32))
                else:
                    t = np.maximum(t, ((np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * 0.6)).astype(np.float32))
        img = c1 * (1 - t[..., None]) + c2 * t[..., None] + rng.normal(0, 4, (size, size, 3))
        out[i] = np.clip(img, 0, 255).astype(np.uint8)
    return out


# -- tissue detection and tiling --------------------------------------------------------------------

WHITE_LEVEL = 215.0
WHITE_CUTOFF = 225.0


def detect_tissue(raster: SlideRaster | np.ndarray) -> TissueMask:
    """Otsu threshold on luminance followed by a 3x3 binary opening.

    Otsu assumes two classes; when the bright class is not background-like
    (all-tissue slide) a fixed near-white cutoff is used instead, and when the
    dark class is itself near-white (blank slide) the mask is empty.
    """
    pixels = raster.pixels if isinstance(raster, SlideRaster) else raster
    gray = rgb_to_gray(pixels)
    sample = gray[::2, ::2]
    if float(np.ptp(sample)) < 1.0:
        t = float(sample.flat[0]) if float(sample.flat[0]) < WHITE_LEVEL else -np.inf
    else:
        t = float(threshold_otsu(sample))
        dark, bright = sample[sample <= t], sample[sample > t]
        if dark.size and dark.mean() >= WHITE_LEVEL:
            t = -np.inf
        elif bright.size and bright.mean() < WHITE_LEVEL:
            t = WHITE_CUTOFF
    mask = gray < t
    mask = ndimage.binary_opening(mask, structure=np.ones((3, 3), dtype=bool))
    return TissueMask(mask=mask, downsample=1)


def _block_mean(a: np.ndarray, size: int) -> np.ndarray:
    gh, gw = a.shape[0] // size, a.shape[1] // size
    blk = a[:gh * size, :gw * size].reshape(gh, size, gw, size)
    return blk.mean(axis=(1, 3), dtype=np.float64)


def extract_grid(raster: SlideRaster, mask: TissueMask, tile_size: int = TILE_SIZE,
                 min_tissue_fraction: float = 0.5) -> TileGrid:
    """Non-overlapping grid (stride = tile_size) of tiles whose tissue fraction reaches the threshold."""
    H, W = raster.height, raster.width
    if H < tile_size or W < tile_size:
        raise SlideError(f"raster {W}x{H} smaller than one {tile_size}px tile")
    m = mask.mask
    if mask.downsample != 1:
        m = np.repeat(np.repeat(m, mask.downsample, axis=0), mask.downsample, axis=1)[:H, :W]
    tissue = _block_mean(m, tile_size)
    if raster.mask is not None:
        lesion = _block_mean(raster.mask == LESION, tile_size)
    else:
        lesion = np.zeros_like(tissue)
    tiles = [
        TileRef(int(r), int(c), int(c * tile_size), int(r * tile_size), float(tissue[r, c]), float(lesion[r, c]))
        for r, c in zip(*np.nonzero(tissue >= min_tissue_fraction))
    ]
    return TileGrid(tiles=tiles, tile_size=tile_size, stride=tile_size, slide_id=raster.slide_id,
                    raster_shape=(H, W))


def sample_tiles(grid: TileGrid, max_tiles: int = MAX_TILES, seed: int = 0) -> TileGrid:
    """Keep every tile if there are at most ``max_tiles``; otherwise sample uniformly without replacement.

    The sampled subset stays in row-major order.
    """
    if max_tiles < 1:
        raise SlideError("max_tiles must be >= 1")
    if len(grid.tiles) <= max_tiles:
        return grid
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(grid.tiles), size=max_tiles, replace=False))
    return replace(grid, tiles=[grid.tiles[i] for i in keep])


def read_tile(raster: SlideRaster, tile: TileRef, tile_size: int = TILE_SIZE) -> np.ndarray:
    if tile.x < 0 or tile.y < 0 or tile.x + tile_size > raster.width or tile.y + tile_size > raster.height:
        raise SlideError(f"tile at ({tile.x}, {tile.y}) exceeds raster {raster.width}x{raster.height}")
    return raster.pixels[tile.y:tile.y + tile_size, tile.x:tile.x + tile_size].copy()


def read_tiles(raster: SlideRaster, grid: TileGrid) -> np.ndarray:
    """All tiles of ``grid`` as a (N, T, T, 3) uint8 stack."""
    T = grid.tile_size
    out = np.empty((len(grid.tiles), T, T, 3), dtype=np.uint8)
    for i, t in enumerate(grid.tiles):
        out[i] = read_tile(raster, t, T)
    return out


def resample_to_mpp(raster: SlideRaster, target_mpp: float = TARGET_MPP) -> SlideRaster:
    """Bilinear resample so that one pixel covers ``target_mpp`` microns; labels use nearest neighbour."""
    if abs(raster.microns_per_pixel - target_mpp) < 1e-9:
        return raster
    f = raster.microns_per_pixel / target_mpp
    nh, nw = max(1, int(round(raster.height * f))), max(1, int(round(raster.width * f)))
    px = np.clip(np.rint(resize_bilinear(raster.pixels, nh, nw)), 0, 255).astype(np.uint8)
    mask = None
    if raster.mask is not None:
        iy = np.minimum((np.arange(nh) / f).astype(int), raster.height - 1)
        ix = np.minimum((np.arange(nw) / f).astype(int), raster.width - 1)
        mask = raster.mask[iy][:, ix]
    return SlideRaster(px, target_mpp, mask, raster.slide_id)


# -- corpora and files ---------------------------------------------------------------------------------

@dataclass
class SlideRecord:
    slide_id: str
    raster_path: str
    mask_path: str
    label: int
    split_hint: str = "train"


def make_corpus_specs(n_slides: int, seed: int, grid_cells: int = 16, positive_share: float = 0.5,
                      lesion_range=(0.06, 0.25), tissue_range=(0.75, 0.9)):
    """Balanced list of (slide_id, spec, seed, label) for a synthetic cohort."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51DE]))
    n_pos = int(round(n_slides * positive_share))
    labels = np.array([1] * n_pos + [0] * (n_slides - n_pos))
    rng.shuffle(labels)
    side = grid_cells * TILE_SIZE
    out = []
    for i, lab in enumerate(labels):
        frac = float(rng.uniform(*lesion_range)) if lab else 0.0
        spec = SyntheticSlideSpec(
            width=side, height=side, tissue_fraction=float(rng.uniform(*tissue_range)),
            lesion_present=bool(lab), lesion_fraction_of_tissue=frac,
            texture_seed=int(rng.integers(0, 2**63)),
        )
        out.append((f"slide_{i:04d}", spec, int(rng.integers(0, 2**63)), int(lab)))
    return out


def write_raster_png(raster: SlideRaster, path) -> None:
    Image.fromarray(raster.pixels, mode="RGB").save(path, format="PNG", compress_level=1)


def write_mask_png(mask: np.ndarray, path) -> None:
    img = Image.fromarray(mask.astype(np.uint8), mode="P")
    img.putpalette([255, 255, 255, 200, 120, 200, 255, 140, 0] + [0] * (256 * 3 - 9))
    img.save(path, format="PNG", compress_level=1)


def read_raster_png(path, mask_path=None, mpp: float = TARGET_MPP, slide_id: str = "") -> SlideRaster:
    with Image.open(path) as im:
        pixels = np.asarray(im.convert("RGB"))
    mask = None
    if mask_path:
        with Image.open(mask_path) as im:
            mask = np.asarray(im)
    return SlideRaster(pixels=pixels, microns_per_pixel=mpp, mask=mask, slide_id=slide_id)


GRID_CSV_HEADER = ["slide_id", "row", "col", "x", "y", "tissue_frac", "lesion_frac"]


def write_grid_csv(grids: Iterable[TileGrid], path) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GRID_CSV_HEADER)
        for g in grids:
            for t in g.tiles:
                w.writerow([g.slide_id, t.row, t.col, t.x, t.y, f"{t.tissue_fraction:.6f}", f"{t.lesion_fraction:.6f}"])
                n += 1
    return n


def read_grid_csv(path, tile_size: int = TILE_SIZE) -> dict[str, TileGrid]:
    grids: dict[str, TileGrid] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            g = grids.setdefault(row["slide_id"], TileGrid(tiles=[], tile_size=tile_size, stride=tile_size,
                                                            slide_id=row["slide_id"]))
            g.tiles.append(TileRef(int(row["row"]), int(row["col"]), int(row["x"]), int(row["y"]),
                                   float(row["tissue_frac"]), float(row["lesion_frac"])))
    return grids


def write_manifest(records: Sequence[SlideRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=False) + "\n")


def read_manifest(path) -> list[SlideRecord]:
    with open(path) as fh:
        return [SlideRecord(**json.loads(line)) for line in fh if line.strip()]
