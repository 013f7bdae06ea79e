import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tessella.augment import (
    OP_BLUR,
    OP_CROP,
    AugmentationConfig,
    Augmenter,
    AugmentError,
    adjust_color,
    crop_resize,
    decode_log,
    encode_log,
    flip,
    gaussian_blur,
    grayscale,
    random_resized_crop,
    replay,
    rotate_discrete,
)


def _textured(seed=0, size=224):
    rng = np.random.default_rng(seed)
    return rng.random((size, size, 3)).astype(np.float32)


def _noop_config():
    return AugmentationConfig(rotate_angles=(90.0,), p_vflip=0, p_hflip=0, crop_scale_range=(1.0, 1.0),
                              crop_ratio_range=(1.0, 1.0), p_jitter=0, p_grayscale=0, p_blur=0)


class TestRotate:
    def test_four_quarter_turns(self):
        x = _textured(1, 16)
        y = x
        for _ in range(4):
            y = rotate_discrete(y, 90)
        assert np.array_equal(x, y)

    def test_quarter_turn_permutation(self):
        a, b, c, d = 1.0, 2.0, 3.0, 4.0
        x = np.array([[a, b], [c, d]])[..., None]
        assert rotate_discrete(x, 90)[..., 0].tolist() == [[c, a], [d, b]]

    def test_170_matches_direct_bilinear(self):
        # oracle: evaluate the inverse map and the 4-tap formula pixel by pixel
        x = _textured(2, 12)
        H, W = x.shape[:2]
        out = rotate_discrete(x, 170)
        assert np.isfinite(out).all()

        def refl(i, n):
            i = i % (2 * n)
            return 2 * n - 1 - i if i >= n else i

        th = math.radians(170)
        cy, cx = (H - 1) / 2, (W - 1) / 2
        for (r, c) in [(0, 0), (0, W - 1), (H - 1, 0), (H - 1, W - 1), (5, 6)]:
            dx, dy = c - cx, r - cy
            sx = math.cos(th) * dx + math.sin(th) * dy + cx
            sy = -math.sin(th) * dx + math.cos(th) * dy + cy
            y0, x0 = math.floor(sy), math.floor(sx)
            fy, fx = sy - y0, sx - x0
            v = sum(x[refl(y0 + i, H), refl(x0 + j, W)] * (fy if i else 1 - fy) * (fx if j else 1 - fx)
                    for i in (0, 1) for j in (0, 1))
            np.testing.assert_allclose(out[r, c], v, atol=1e-5)

    def test_angle_outside_set_rejected(self):
        with pytest.raises(AugmentError):
            rotate_discrete(_textured(0, 8), 45, allowed=(90, 170, 280))


class TestFlip:
    def test_involution(self):
        x = _textured(3, 8)
        assert np.array_equal(flip(flip(x, "v"), "v"), x)
        assert np.array_equal(flip(flip(x, "h"), "h"), x)

    def test_vflip_column(self):
        x = np.array([[1.0], [2.0]])[..., None]
        assert flip(x, "v")[..., 0].tolist() == [[2.0], [1.0]]

    def test_both_flips_is_half_turn(self):
        x = _textured(4, 8)
        assert np.array_equal(flip(flip(x, "h"), "v"), rotate_discrete(x, 180))

    def test_dihedral_group(self):
        block = np.arange(16, dtype=np.float64).reshape(4, 4, 1)
        ops = {}
        for k, f in itertools.product(range(4), (False, True)):
            y = block
            for _ in range(k):
                y = rotate_discrete(y, 90)
            if f:
                y = flip(y, "v")
            ops[(k, f)] = y[..., 0].astype(int)
        keys = {m.tobytes() for m in ops.values()}
        assert len(keys) == 8
        # closure: composing any two elements lands in the set
        perms = {k: m.ravel() for k, m in ops.items()}
        for p, q in itertools.product(perms.values(), repeat=2):
            assert p[q].reshape(4, 4).astype(int).tobytes() in keys


class TestCrop:
    def test_full_crop_identity(self):
        x = _textured(5)
        assert np.array_equal(crop_resize(x, (0, 0, 224, 224), 224), x)

    def test_constant_tile(self):
        x = np.full((224, 224, 3), 0.3, dtype=np.float32)
        rng = np.random.default_rng(0)
        for _ in range(5):
            box = random_resized_crop(x.shape, rng)
            np.testing.assert_allclose(crop_resize(x, box, 224), 0.3, atol=1e-6)

    def test_area_and_aspect_bounds(self):
        rng = np.random.default_rng(7)
        fr, asp = [], []
        for _ in range(10_000):
            top, left, h, w = random_resized_crop((224, 224), rng)
            assert top >= 0 and left >= 0 and top + h <= 224 and left + w <= 224
            fr.append(h * w / 224 ** 2)
            asp.append(w / h)
        fr, asp = np.array(fr), np.array(asp)
        assert fr.min() >= 0.2 and fr.max() <= 1.0
        assert asp.min() >= 3 / 4 and asp.max() <= 4 / 3

    def test_upscale_matches_formula(self):
        # centres aligned, edge pixels repeated past the crop window
        x = _textured(6, 8)
        box = (1, 2, 4, 5)
        out = crop_resize(x, box, 10)
        sub = x[1:5, 2:7]
        for r, c in [(0, 0), (3, 7), (9, 9)]:
            sy = min(max((r + 0.5) * 4 / 10 - 0.5, 0), 3)
            sx = min(max((c + 0.5) * 5 / 10 - 0.5, 0), 4)
            y0, x0 = min(int(sy), 2), min(int(sx), 3)
            fy, fx = sy - y0, sx - x0
            v = (sub[y0, x0] * (1 - fy) * (1 - fx) + sub[y0, x0 + 1] * (1 - fy) * fx
                 + sub[y0 + 1, x0] * fy * (1 - fx) + sub[y0 + 1, x0 + 1] * fy * fx)
            np.testing.assert_allclose(out[r, c], v, atol=1e-5)


class TestColor:
    def test_neutral_jitter(self):
        x = _textured(8, 32)
        assert np.array_equal(adjust_color(x, 1.0, 1.0, 1.0, 0.0), x)

    def test_gray_tile_unchanged(self):
        g = np.random.default_rng(0).random((16, 16, 1)).astype(np.float32)
        x = np.repeat(g, 3, axis=2)
        np.testing.assert_allclose(grayscale(x), x, atol=1e-6)

    def test_hue_roundtrip(self):
        x = _textured(9, 16)
        y = adjust_color(adjust_color(x, hue=0.1), hue=-0.1)
        np.testing.assert_allclose(y, x, atol=1e-4)

    def test_brightness_scales(self):
        x = np.full((4, 4, 3), 0.25, dtype=np.float32)
        np.testing.assert_allclose(adjust_color(x, brightness=1.5), 0.375, atol=1e-7)
        np.testing.assert_allclose(adjust_color(x, brightness=8.0), 1.0)

    def test_blur_impulse_dense_oracle(self):
        n, sigma = 21, 0.5
        x = np.zeros((n, n, 3), dtype=np.float32)
        x[10, 10] = 1.0
        out = gaussian_blur(x, sigma)
        r = math.ceil(3 * sigma)
        yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
        k2 = np.exp(-(yy ** 2 + xx ** 2) / (2 * sigma ** 2))
        k2 /= k2.sum()
        expect = np.zeros((n, n))
        expect[10 - r:10 + r + 1, 10 - r:10 + r + 1] = k2
        np.testing.assert_allclose(out[..., 0], expect, atol=1e-6)

    def test_blur_sigma_range(self):
        with pytest.raises(AugmentError):
            gaussian_blur(_textured(0, 8), 3.0, sigma_range=(0.1, 2.0))


class TestConfig:
    def test_defaults(self):
        cfg = AugmentationConfig()
        assert cfg.rotate_angles == (90.0, 170.0, 280.0)
        assert cfg.crop_scale_range == (0.2, 1.0) and cfg.blur_sigma_range == (0.1, 2.0)
        assert (cfg.brightness, cfg.contrast, cfg.saturation, cfg.hue) == (0.8, 0.8, 0.8, 0.2)
        assert AugmentationConfig(rotate_mode="right_angles").rotate_angles == (90.0, 180.0, 270.0)

    @pytest.mark.parametrize("bad", [dict(p_hflip=1.5), dict(crop_scale_range=(0.5, 0.2)),
                                     dict(blur_sigma_range=(2.0, 0.1)), dict(rotate_mode="x")])
    def test_rejects(self, bad):
        with pytest.raises(AugmentError):
            AugmentationConfig(**bad)

    def test_dict_round_trip(self):
        cfg = AugmentationConfig(p_blur=0.3)
        assert AugmentationConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(AugmentError):
            AugmentationConfig.from_dict({"nope": 1})


class TestTwoViews:
    def test_deterministic(self):
        aug = Augmenter()
        x = _textured(10)
        a = aug.two_views(x, np.random.default_rng(3))
        b = aug.two_views(x, np.random.default_rng(3))
        assert a.query_view.tobytes() == b.query_view.tobytes()
        assert a.key_view.tobytes() == b.key_view.tobytes()

    def test_views_differ(self):
        aug = Augmenter()
        for s in range(5):
            p = aug.two_views(_textured(s), np.random.default_rng(s))
            assert np.abs(p.query_view - p.key_view).max() > 0

    def test_noop_config(self):
        aug = Augmenter(_noop_config())
        x = _textured(11)
        rng = np.random.default_rng(0)
        for _ in range(10):
            p = aug.two_views(x, rng)
            if p.query_log[0][1][0] == 0 and p.key_log[0][1][0] == 0:
                assert np.array_equal(p.query_view, x) and np.array_equal(p.key_view, x)

    def test_noop_config_without_rotation(self):
        cfg = _noop_config()
        cfg.rotate_angles = ()
        aug = Augmenter(cfg)
        x = _textured(12)
        p = aug.two_views(x, np.random.default_rng(1))
        assert np.array_equal(p.query_view, x) and np.array_equal(p.key_view, x)

    def test_uint8_input(self):
        x = (np.random.default_rng(0).random((224, 224, 3)) * 255).astype(np.uint8)
        p = Augmenter().two_views(x, np.random.default_rng(0))
        assert p.query_view.dtype == np.float32

    def test_batch_shapes(self):
        tiles = np.stack([_textured(i) for i in range(3)])
        q, k = Augmenter().batch(tiles, np.random.default_rng(0))
        assert q.shape == k.shape == (3, 224, 224, 3)


class TestReplay:
    def test_log_binary_layout(self):
        recs = [(OP_CROP, (1.0, 2.0, 3.0, 4.0)), (OP_BLUR, (0.5,))]
        blob = encode_log(recs)
        assert len(blob) == (1 + 16) + (1 + 4)
        assert blob[0] == OP_CROP and blob[17] == OP_BLUR
        assert decode_log(blob) == recs

    def test_truncated_log(self):
        with pytest.raises(AugmentError):
            decode_log(encode_log([(OP_BLUR, (0.5,))])[:-1])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.sampled_from(["table", "right_angles"]))
    def test_replay_bit_exact(self, seed, mode):
        aug = Augmenter(AugmentationConfig(rotate_mode=mode))
        x = _textured(seed % 7, 64)
        aug.config.output_size = 64
        view, log = aug.view(x, np.random.default_rng(seed))
        again = replay(x, decode_log(encode_log(log)), output_size=64)
        assert again.tobytes() == view.tobytes()
        assert view.shape == (64, 64, 3)
        assert view.min() >= 0.0 and view.max() <= 1.0
