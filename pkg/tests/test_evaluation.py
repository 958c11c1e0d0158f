import os

import numpy as np
import pytest

from scfs import backbone as bb
from scfs import tensor as T
from scfs.evaluation import (FeatureBank, attention_export, bank_bytes, export_attention, extract_features, knn_eval,
                             knn_predict, linear_probe, load_bank, maps_from_features, normalize_heatmap, read_pnm,
                             save_bank)
from scfs.tensor import ParameterError, Tensor


def bank(x, y, layer="trunk"):
    x = np.asarray(x, np.float32)
    return FeatureBank(x / np.linalg.norm(x, axis=1, keepdims=True), np.asarray(y), layer)


def small_params(seed=0):
    return bb.init_params(seed, widths=(4, 8, 16), K=8, hidden=8, bottleneck=4)


class TestExtract:
    def test_identical_images_identical_rows(self):
        img = np.random.default_rng(0).uniform(0, 1, (16, 16, 3))
        f = extract_features(small_params(), np.stack([img, img]), image_size=16)
        np.testing.assert_array_equal(f[0], f[1])

    def test_trunk_shape_and_unit_rows(self):
        imgs = np.random.default_rng(0).uniform(0, 1, (5, 24, 24, 3))
        f = extract_features(small_params(), imgs, image_size=16)
        assert f.shape == (5, 16)
        np.testing.assert_allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-5)

    def test_stage_matches_pooling(self):
        p = small_params()
        imgs = np.random.default_rng(1).uniform(0, 1, (3, 16, 16, 3)).astype(np.float32)
        f = extract_features(p, imgs, "res3", None)
        with T.no_grad():
            m = bb.encode(p, Tensor(imgs.transpose(0, 3, 1, 2)))["res3"].data.mean(axis=(2, 3))
        np.testing.assert_allclose(f, m / np.linalg.norm(m, axis=1, keepdims=True), atol=1e-6)

    def test_uint8_is_scaled(self):
        imgs = np.random.default_rng(2).integers(0, 256, (2, 16, 16, 3), dtype=np.uint8)
        a = extract_features(small_params(), imgs, image_size=None)
        b = extract_features(small_params(), imgs.astype(np.float32) / 255, image_size=None)
        np.testing.assert_array_equal(a, b)

    def test_unknown_layer(self):
        with pytest.raises(ParameterError):
            extract_features(small_params(), np.zeros((1, 16, 16, 3)), "res9")


class TestKnn:
    def test_identity_neighbour(self):
        rng = np.random.default_rng(0)
        train = bank(rng.normal(size=(10, 4)), np.arange(10) % 3)
        test = FeatureBank(train.features[[4]], train.labels[[4]])
        assert knn_eval(train, test, k=1) == 1.0

    @pytest.mark.parametrize("k", [1, 3, 6])
    def test_antipodal_classes(self, k):
        rng = np.random.default_rng(1)
        d = np.array([1.0, 0.0, 0.0])
        x = np.vstack([d + 0.1 * rng.normal(size=(3, 3)), -d + 0.1 * rng.normal(size=(3, 3))])
        train = bank(x, [0] * 3 + [1] * 3)
        test = bank(np.vstack([d, -d]), [0, 1])
        assert knn_eval(train, test, k=k) == 1.0

    def test_random_labels_near_chance(self):
        rng = np.random.default_rng(2)
        train = bank(rng.normal(size=(600, 8)), rng.integers(0, 3, 600))
        test = bank(rng.normal(size=(1000, 8)), rng.integers(0, 3, 1000))
        assert abs(knn_eval(train, test) - 1 / 3) <= 0.05

    def test_subset_with_k1(self):
        rng = np.random.default_rng(3)
        train = bank(rng.normal(size=(30, 5)), rng.integers(0, 3, 30))
        test = FeatureBank(train.features[5:15], train.labels[5:15])
        assert knn_eval(train, test, k=1) == 1.0

    def test_scale_invariance_exact(self):
        rng = np.random.default_rng(4)
        x, q = rng.normal(size=(40, 6)), rng.normal(size=(25, 6))
        y = rng.integers(0, 3, 40)
        base = knn_predict(x, y, q, k=5)
        np.testing.assert_array_equal(base, knn_predict(3.7 * x, y, 3.7 * q, k=5))

    def test_empty_bank(self):
        with pytest.raises(ParameterError):
            knn_eval(FeatureBank(np.zeros((0, 3), np.float32), np.zeros(0, int)), bank([[1, 0, 0]], [0]))

    def test_layer_mismatch(self):
        with pytest.raises(ParameterError):
            knn_eval(bank([[1, 0]], [0]), bank([[1, 0]], [0], "res3"))

    def test_k_too_large(self):
        with pytest.raises(ParameterError):
            knn_eval(bank([[1, 0]], [0]), bank([[1, 0]], [0]), k=2)


class TestLinearProbe:
    def test_separable(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 2, 200)
        x = rng.normal(size=(200, 4))
        x[:, 0] = np.where(y == 1, 3.0, -3.0)
        b = bank(x, y)
        assert linear_probe(b, b, epochs=30) == 1.0

    def test_shuffled_labels_near_chance(self):
        rng = np.random.default_rng(1)
        tr = bank(rng.normal(size=(600, 8)), rng.integers(0, 3, 600))
        te = bank(rng.normal(size=(600, 8)), rng.integers(0, 3, 600))
        assert abs(linear_probe(tr, te, epochs=20) - 1 / 3) <= 0.07

    def test_train_set_at_least_as_good(self):
        rng = np.random.default_rng(2)
        centers = rng.normal(size=(3, 30))
        ytr, yte = rng.integers(0, 3, 90), rng.integers(0, 3, 90)
        tr = bank(centers[ytr] + 1.5 * rng.normal(size=(90, 30)), ytr)
        te = bank(centers[yte] + 1.5 * rng.normal(size=(90, 30)), yte)
        assert linear_probe(tr, tr, epochs=30) >= linear_probe(tr, te, epochs=30)


class TestBankFile:
    def test_round_trip_bytes(self, tmp_path):
        b = bank(np.random.default_rng(0).normal(size=(7, 5)), [0, 1, 2, 0, 1, 2, 0])
        save_bank(tmp_path / "a", b)
        again = load_bank(tmp_path / "a")
        save_bank(tmp_path / "b", again)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        np.testing.assert_array_equal(again.labels, b.labels)

    def test_header_layout(self):
        raw = bank_bytes(bank(np.ones((2, 3)), [1, 0]))
        assert raw[:8] == b"SCFSBANK" and len(raw) == 8 + 4 + 16 + 2 * 3 * 4 + 2 * 4

    def test_truncated(self, tmp_path):
        (tmp_path / "x").write_bytes(bank_bytes(bank(np.ones((2, 3)), [1, 0]))[:-1])
        with pytest.raises(ValueError):
            load_bank(tmp_path / "x")


class TestAttentionExport:
    def test_counts_files(self, tmp_path):
        p = small_params()
        rng = np.random.default_rng(0)
        g = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
        locs = [rng.uniform(0, 1, (16, 16, 3)).astype(np.float32) for _ in range(3)]
        paths = attention_export(p, g, locs, "res3", tmp_path / "out")
        assert len(paths) == 4
        assert len([f for f in os.listdir(tmp_path / "out") if f.endswith(".pgm")]) == 4
        assert read_pnm(paths[0]).shape == (32, 32)

    def test_constant_global_map(self):
        maps = maps_from_features(np.ones((4, 3, 3)), [np.random.default_rng(0).uniform(size=(4, 2, 2))])
        a = maps["locals"][0]
        np.testing.assert_allclose(a, a.flat[0], rtol=1e-6)
        assert (normalize_heatmap(a) == 1).all()

    def test_argmax_inside_sub_crop(self):
        rng = np.random.default_rng(5)
        g = rng.uniform(0, 0.2, (8, 6, 6))
        g[3, 2:4, 1:3] = 4.0
        maps = maps_from_features(g, [g[:, 2:4, 1:3]])
        y, x = np.unravel_index(maps["locals"][0].argmax(), (6, 6))
        assert 2 <= y < 4 and 1 <= x < 3
        assert np.all(np.abs(maps["locals"][0]) <= 1 + 1e-5)

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        maps = {"locals": [np.zeros((2, 2))], "mean": np.zeros((2, 2))}
        with pytest.raises(OSError):
            export_attention(maps, np.zeros((4, 4, 3)), blocker / "sub")
