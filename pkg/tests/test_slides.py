import numpy as np
import pytest

from tessella.slides import (
    LESION,
    TILE_SIZE,
    SlideError,
    SlideRaster,
    SyntheticSlideSpec,
    TileGrid,
    TileRef,
    TissueMask,
    detect_tissue,
    extract_grid,
    generate_synthetic_slide,
    make_corpus_specs,
    read_grid_csv,
    read_manifest,
    read_raster_png,
    read_tile,
    resample_to_mpp,
    sample_tiles,
    SlideRecord,
    write_grid_csv,
    write_manifest,
    write_mask_png,
    write_raster_png,
)


def _spec(**kw):
    base = dict(width=896, height=896, tissue_fraction=0.7, lesion_present=False,
                lesion_fraction_of_tissue=0.0, texture_seed=3)
    base.update(kw)
    return SyntheticSlideSpec(**base)


@pytest.fixture(scope="module")
def lesion_slide():
    return generate_synthetic_slide(_spec(width=1344, height=1344, lesion_present=True,
                                          lesion_fraction_of_tissue=0.1), seed=11)


class TestGenerate:
    def test_no_tissue(self):
        r = generate_synthetic_slide(_spec(tissue_fraction=0.0), seed=1)
        assert (r.mask == 0).all()

    def test_no_lesion_pixels_without_lesion(self):
        r = generate_synthetic_slide(_spec(), seed=1)
        assert not (r.mask == LESION).any()

    def test_lesion_share(self, lesion_slide):
        m = lesion_slide.mask
        share = (m == LESION).sum() / (m > 0).sum()
        assert abs(share - 0.1) <= 0.03

    def test_background_near_white(self, lesion_slide):
        bg = lesion_slide.pixels[lesion_slide.mask == 0]
        assert bg.mean() > 230

    def test_deterministic(self):
        a = generate_synthetic_slide(_spec(), seed=5)
        b = generate_synthetic_slide(_spec(), seed=5)
        assert a.pixels.tobytes() == b.pixels.tobytes() and a.mask.tobytes() == b.mask.tobytes()
        c = generate_synthetic_slide(_spec(), seed=6)
        assert a.pixels.tobytes() != c.pixels.tobytes()

    @pytest.mark.parametrize("bad", [dict(width=400), dict(tissue_fraction=1.5),
                                     dict(lesion_present=True, lesion_fraction_of_tissue=0.0)])
    def test_invalid_spec_rejected(self, bad):
        with pytest.raises(SlideError):
            generate_synthetic_slide(_spec(**bad), seed=0)


class TestDetectTissue:
    def test_all_white(self):
        r = SlideRaster(np.full((500, 500, 3), 245, dtype=np.uint8))
        assert not detect_tissue(r).mask.any()

    def test_iou_against_ground_truth(self, lesion_slide):
        m = detect_tissue(lesion_slide).mask
        truth = lesion_slide.mask > 0
        assert (m & truth).sum() / (m | truth).sum() >= 0.90

    def test_all_tissue_coverage(self):
        r = generate_synthetic_slide(_spec(tissue_fraction=1.0), seed=2)
        assert detect_tissue(r).mask.mean() >= 0.99


class TestGrid:
    def test_full_tissue_grid(self):
        r = SlideRaster(np.zeros((2240, 2240, 3), dtype=np.uint8))
        g = extract_grid(r, TissueMask(np.ones((2240, 2240), dtype=bool)))
        assert len(g) == 100
        assert [(t.row, t.col) for t in g.tiles] == [(i, j) for i in range(10) for j in range(10)]

    def test_background_grid_empty(self):
        r = SlideRaster(np.full((896, 896, 3), 245, dtype=np.uint8))
        assert len(extract_grid(r, detect_tissue(r))) == 0

    def test_half_tissue(self):
        r = SlideRaster(np.zeros((2240, 2240, 3), dtype=np.uint8))
        mask = np.zeros((2240, 2240), dtype=bool)
        mask[:, :1120] = True
        g = extract_grid(r, TissueMask(mask), min_tissue_fraction=0.5)
        expected_cols = {c for c in range(10) if mask[:, c * 224:(c + 1) * 224].mean() >= 0.5}
        assert {t.col for t in g.tiles} == expected_cols == set(range(5))
        assert len(g) == 50

    def test_raster_smaller_than_tile(self):
        r = SlideRaster(np.zeros((100, 300, 3), dtype=np.uint8))
        with pytest.raises(SlideError):
            extract_grid(r, TissueMask(np.ones((100, 300), dtype=bool)))

    def test_non_overlapping_exhaustive(self, lesion_slide):
        g = extract_grid(lesion_slide, detect_tissue(lesion_slide))
        cover = np.zeros(lesion_slide.mask.shape, dtype=np.int32)
        for t in g.tiles:
            assert 0 <= t.x and t.x + 224 <= lesion_slide.width and t.y + 224 <= lesion_slide.height
            cover[t.y:t.y + 224, t.x:t.x + 224] += 1
        assert cover.max() <= 1 and cover.sum() == len(g) * 224 ** 2
        order = [(t.row, t.col) for t in g.tiles]
        assert order == sorted(order)

    def test_lesion_fraction_from_mask(self, lesion_slide):
        g = extract_grid(lesion_slide, detect_tissue(lesion_slide))
        for t in g.tiles[:20]:
            block = lesion_slide.mask[t.y:t.y + 224, t.x:t.x + 224]
            assert t.lesion_fraction == pytest.approx((block == LESION).mean())

    def test_positive_label_iff_lesion_tiles(self):
        for sid, spec, seed, label in make_corpus_specs(4, seed=9, grid_cells=4):
            r = generate_synthetic_slide(spec, seed, sid)
            g = extract_grid(r, detect_tissue(r))
            assert bool(label) == bool((g.lesion_fractions() > 0).any())


def _grid(n):
    return TileGrid(tiles=[TileRef(i // 200, i % 200, 0, 0, 1.0) for i in range(n)])


class TestSampleTiles:
    def test_small_grid_unchanged(self):
        g = _grid(100)
        assert sample_tiles(g, 10_000, seed=0).tiles == g.tiles

    def test_cap(self):
        s = sample_tiles(_grid(12_000), 10_000, seed=0)
        assert len(s) == 10_000 and len(set(s.tiles)) == 10_000

    def test_deterministic_subset(self):
        g = _grid(500)
        a, b = sample_tiles(g, 50, seed=4), sample_tiles(g, 50, seed=4)
        assert a.tiles == b.tiles
        assert set(a.tiles) <= set(g.tiles)

    def test_invalid_cap(self):
        with pytest.raises(SlideError):
            sample_tiles(_grid(3), 0)


class TestReadTile:
    def test_constant_raster(self):
        r = SlideRaster(np.full((448, 448, 3), 77, dtype=np.uint8))
        t = read_tile(r, TileRef(0, 0, 0, 0, 1.0))
        assert t.shape == (224, 224, 3) and (t == 77).all()

    def test_out_of_bounds(self):
        r = SlideRaster(np.zeros((448, 448, 3), dtype=np.uint8))
        with pytest.raises(SlideError):
            read_tile(r, TileRef(1, 1, 300, 0, 1.0))

    def test_png_round_trip(self, tmp_path, lesion_slide):
        write_raster_png(lesion_slide, tmp_path / "s.png")
        write_mask_png(lesion_slide.mask, tmp_path / "m.png")
        back = read_raster_png(tmp_path / "s.png", tmp_path / "m.png")
        assert np.array_equal(back.mask, lesion_slide.mask)
        ref = TileRef(1, 2, 448, 224, 1.0)
        assert read_tile(back, ref).tobytes() == lesion_slide.pixels[224:448, 448:672].tobytes()


class TestFiles:
    def test_grid_csv(self, tmp_path, lesion_slide):
        g = extract_grid(lesion_slide, detect_tissue(lesion_slide))
        g.slide_id = "s1"
        n = write_grid_csv([g], tmp_path / "tiles.csv")
        header = (tmp_path / "tiles.csv").read_text().splitlines()[0]
        assert header == "slide_id,row,col,x,y,tissue_frac,lesion_frac"
        back = read_grid_csv(tmp_path / "tiles.csv")["s1"]
        assert n == len(g) == len(back)
        assert [(t.row, t.col, t.x, t.y) for t in back.tiles] == [(t.row, t.col, t.x, t.y) for t in g.tiles]

    def test_manifest(self, tmp_path):
        recs = [SlideRecord("a", "a.png", "a_mask.png", 1, "train"), SlideRecord("b", "b.png", "b_mask.png", 0)]
        write_manifest(recs, tmp_path / "m.jsonl")
        assert read_manifest(tmp_path / "m.jsonl") == recs
        import json
        keys = list(json.loads((tmp_path / "m.jsonl").read_text().splitlines()[0]))
        assert keys == ["slide_id", "raster_path", "mask_path", "label", "split_hint"]


def test_resample_halves_resolution():
    r = SlideRaster(np.full((448, 448, 3), 100, dtype=np.uint8), microns_per_pixel=0.25,
                    mask=np.ones((448, 448), dtype=np.uint8))
    out = resample_to_mpp(r, 0.5)
    assert out.pixels.shape == (224, 224, 3) and (out.pixels == 100).all() and out.mask.shape == (224, 224)
    assert resample_to_mpp(out, 0.5) is out


def test_tile_size_constant():
    assert TILE_SIZE == 224
