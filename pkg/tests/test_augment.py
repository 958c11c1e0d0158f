import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scfs.augment import (AugConfig, adjust_brightness, batch_views, hflip, make_views, photometric,
                          random_resized_crop, resize_bilinear, sample_crop_box)

OFF = dict(flip_prob=0.0, jitter_prob=0.0, grayscale_prob=0.0, blur_prob=0.0)


def rand_img(h=20, w=20, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (h, w, 3)).astype(np.float32)


class TestCrop:
    def test_full_scale_square_is_resized_whole_image(self):
        im = rand_img(8, 8)
        out = random_resized_crop(im, (1.0, 1.0), 4, np.random.default_rng(0), ratio=(1.0, 1.0))
        np.testing.assert_allclose(out, resize_bilinear(im, 4, 4))

    def test_quarter_area_crop_stays_in_source_range(self):
        im = rand_img(4, 4)
        rng = np.random.default_rng(5)
        top, left, ch, cw = sample_crop_box(4, 4, (0.25, 0.25), np.random.default_rng(5), (1.0, 1.0))
        assert (ch, cw) == (2, 2)
        out = random_resized_crop(im, (0.25, 0.25), 3, rng, ratio=(1.0, 1.0))
        region = im[top : top + 2, left : left + 2]
        assert out.min() >= region.min() - 1e-6 and out.max() <= region.max() + 1e-6

    def test_same_size_is_exact_copy(self):
        im = rand_img(4, 4)
        rng = np.random.default_rng(5)
        top, left, ch, cw = sample_crop_box(4, 4, (0.25, 0.25), np.random.default_rng(5), (1.0, 1.0))
        out = random_resized_crop(im, (0.25, 0.25), 2, rng, ratio=(1.0, 1.0))
        np.testing.assert_array_equal(out, im[top : top + ch, left : left + cw])

    def test_center_fallback_after_failed_tries(self):
        # a 1x40 strip cannot host a square-ish crop of half its area
        top, left, ch, cw = sample_crop_box(1, 40, (0.5, 0.5), np.random.default_rng(0), (1.0, 1.0))
        assert (top, ch) == (0, 1) and 0 <= left and left + cw <= 40

    def test_rejects_bad_scale(self):
        with pytest.raises(ValueError):
            random_resized_crop(rand_img(), (0.0, 0.5), 4, np.random.default_rng(0))

    def test_bilinear_constant_image(self):
        im = np.full((5, 7, 3), 0.3, dtype=np.float32)
        np.testing.assert_allclose(resize_bilinear(im, 9, 3), 0.3, rtol=1e-6)


class TestPhotometric:
    def test_all_off_is_identity(self):
        im = rand_img()
        out = photometric(im, AugConfig(**OFF), np.random.default_rng(0))
        np.testing.assert_array_equal(out, im)

    def test_flip_is_involution(self):
        im = rand_img()
        np.testing.assert_array_equal(hflip(hflip(im)), im)

    def test_forced_flip(self):
        im = rand_img()
        out = photometric(im, AugConfig(**{**OFF, "flip_prob": 1.0}), np.random.default_rng(0))
        np.testing.assert_array_equal(out, im[:, ::-1])

    def test_brightness_zero(self):
        assert not adjust_brightness(rand_img(), 0.0).any()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_output_in_unit_range(self, seed):
        cfg = AugConfig(flip_prob=0.5, jitter_prob=1.0, grayscale_prob=0.5, blur_prob=1.0)
        out = photometric(rand_img(seed=seed % 100), cfg, np.random.default_rng(seed))
        assert out.min() >= 0 and out.max() <= 1 and out.dtype == np.float32


class TestViews:
    def test_counts_and_sizes(self):
        vs = make_views(rand_img(64, 64), AugConfig(n_locals=8))
        assert len(vs.globals) == 2 and len(vs.locals) == 8
        assert all(v.shape == (32, 32, 3) for v in vs.globals)
        assert all(v.shape == (16, 16, 3) for v in vs.locals)

    def test_deterministic(self):
        a = make_views(rand_img(64, 64), AugConfig(seed=3), image_index=7, epoch=2)
        b = make_views(rand_img(64, 64), AugConfig(seed=3), image_index=7, epoch=2)
        for x, y in zip(a.globals + a.locals, b.globals + b.locals):
            assert x.tobytes() == y.tobytes()

    def test_streams_differ_by_image_and_epoch(self):
        im = rand_img(64, 64)
        base = make_views(im, AugConfig(seed=3), image_index=7, epoch=2).globals[0]
        assert not np.array_equal(base, make_views(im, AugConfig(seed=3), image_index=8, epoch=2).globals[0])
        assert not np.array_equal(base, make_views(im, AugConfig(seed=3), image_index=7, epoch=3).globals[0])

    def test_no_locals(self):
        vs = make_views(rand_img(64, 64), AugConfig(n_locals=0))
        assert len(vs.globals) == 2 and vs.locals == []

    def test_too_small_image(self):
        with pytest.raises(ValueError):
            make_views(rand_img(8, 8), AugConfig(local_size=16))

    def test_bad_scale_ranges(self):
        with pytest.raises(ValueError):
            AugConfig(local_scale=(0.05, 0.5), global_scale=(0.14, 0.4)).validate()

    def test_batch_matches_single(self):
        ims = np.stack([rand_img(32, 32, s) for s in range(3)])
        cfg = AugConfig(global_size=16, local_size=8, n_locals=2)
        g, l = batch_views(ims, [2, 0], cfg, epoch=1)
        assert g.shape == (2, 2, 3, 16, 16) and l.shape == (2, 2, 3, 8, 8)
        vs = make_views(ims[0], cfg, image_index=0, epoch=1)
        np.testing.assert_array_equal(g[1, 1], vs.globals[1].transpose(2, 0, 1))
        np.testing.assert_array_equal(l[0, 1], vs.locals[0].transpose(2, 0, 1))
