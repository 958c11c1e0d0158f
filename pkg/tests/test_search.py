import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import feature_search_naive
from scfs import backbone as bb
from scfs import tensor as T
from scfs.ema import ema_update, make_teacher
from scfs.losses import fs_loss
from scfs.search import (FsPairs, attention_map, feature_augment, feature_search, fs_project, init_fs_head)
from scfs.tensor import ComputationRecord, DimensionError, Tensor


def f64(x):
    return Tensor(np.asarray(x, np.float64), dtype=np.float64)


def fs_params(channels=6, k=10, seed=0, layer="res2"):
    rng = np.random.default_rng(seed)
    return bb.to_tensors(init_fs_head(rng, layer, channels, k, 0.5, 7))


class TestAttention:
    def test_self_similarity(self):
        q = np.array([0.3, -1.0, 2.0])
        f = np.broadcast_to(q[:, None, None], (3, 2, 3))
        np.testing.assert_allclose(attention_map(q, f).data, 1.0, rtol=1e-6)

    def test_orthogonal_position(self):
        f = np.zeros((2, 1, 2))
        f[:, 0, 0] = [0, 1]
        f[:, 0, 1] = [1, 0]
        a = attention_map(np.array([1.0, 0.0]), f).data
        assert a[0, 0] == 0 and a[0, 1] == pytest.approx(1.0)

    def test_half_diagonal(self):
        a = attention_map(np.array([1.0, 0.0]), np.ones((2, 1, 1))).data
        assert a.item() == pytest.approx(0.70711, abs=1e-5)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            attention_map(np.ones(3), np.ones((2, 2, 2)))

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            attention_map(np.ones(2), np.ones((2, 2, 2)), mode="dot")

    def test_softmax_mode_sums_to_one(self):
        rng = np.random.default_rng(0)
        a = attention_map(rng.normal(size=(3, 4)), rng.normal(size=(3, 4, 2, 2)), mode="softmax").data
        np.testing.assert_allclose(a.sum(axis=(1, 2)), 1.0, rtol=1e-5)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
    def test_bounded_and_scale_invariant(self, seed, alpha):
        rng = np.random.default_rng(seed)
        q = rng.normal(size=5)
        f = rng.normal(size=(5, 3, 3))
        with T.default_dtype(np.float64):
            a = attention_map(f64(q), f64(f)).data
            b = attention_map(f64(alpha * q), f64(f)).data
        assert np.all(np.abs(a) <= 1 + 1e-5)
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_zero_query_is_finite(self):
        a = attention_map(np.zeros(3), np.ones((3, 2, 2))).data
        assert np.isfinite(a).all() and not a.any()

    def test_map_side_gets_no_gradient(self):
        q = Tensor(np.ones(2), requires_grad=True)
        f = Tensor(np.random.default_rng(0).normal(size=(2, 2, 2)), requires_grad=True)
        with ComputationRecord() as rec:
            loss = T.tsum(attention_map(q, f))
        T.backward(loss, rec)
        assert f.grad is None


class TestAugment:
    def test_zero_attention(self):
        assert not feature_augment(np.zeros((2, 2)), np.ones((3, 2, 2))).data.any()

    def test_unit_attention(self):
        f = np.random.default_rng(0).normal(size=(3, 2, 2)).astype(np.float32)
        np.testing.assert_array_equal(feature_augment(np.ones((2, 2)), f).data, f)

    def test_direct_value(self):
        out = feature_augment(np.array([[0.5]]), np.array([2.0, 4.0]).reshape(2, 1, 1)).data
        np.testing.assert_allclose(out.ravel(), [1, 2])

    def test_spatial_mismatch(self):
        with pytest.raises(DimensionError):
            feature_augment(np.ones((2, 3)), np.ones((1, 2, 2)))


class TestOracle:
    def test_matches_loop_reference(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            c = int(rng.integers(1, 9))
            h, w = rng.integers(1, 5, 2)
            hg, wg = rng.integers(1, 5, 2)
            local = rng.normal(size=(c, h, w))
            glob = rng.normal(size=(c, hg, wg))
            att_ref, aug_ref = feature_search_naive(local, glob)
            with T.default_dtype(np.float64):
                q = T.global_avg_pool(f64(local[None]))
                att = attention_map(T.reshape(q, (c,)), f64(glob))
                aug = feature_augment(att, f64(glob))
            np.testing.assert_allclose(att.data, att_ref, atol=1e-6)
            np.testing.assert_allclose(aug.data, aug_ref, atol=1e-6)

    def test_argmax_inside_planted_region(self):
        rng = np.random.default_rng(3)
        glob = rng.uniform(0, 1, (6, 4, 4))
        glob[:, 1:3, 2:4] = 0
        glob[0, 1:3, 2:4] = 5.0  # one-hot channel only inside the region
        local = glob[:, 1:3, 2:4].copy()
        att, _ = feature_search_naive(local, glob)
        y, x = np.unravel_index(attention_map(local.mean(axis=(1, 2)), glob).data.argmax(), (4, 4))
        assert 1 <= y < 3 and 2 <= x < 4
        assert np.unravel_index(att.argmax(), att.shape) == (y, x)


class TestProjection:
    def test_zero_map_zero_logits(self):
        p = fs_params()
        assert not fs_project(p, "res2", np.zeros((6, 3, 3), np.float32)).data.any()

    @pytest.mark.parametrize("size", [1, 2, 5])
    def test_output_length_independent_of_size(self, size):
        p = bb.to_tensors(init_fs_head(np.random.default_rng(0), "res3", 6))
        assert fs_project(p, "res3", np.ones((6, size, size), np.float32)).shape == (256,)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            fs_project(fs_params(), "res2", np.ones((5, 2, 2), np.float32))

    def test_synced_copy_gives_same_logits(self):
        student = fs_params(seed=1)
        teacher = make_teacher(fs_params(seed=2))
        ema_update(student, teacher, 0.0)
        m = np.random.default_rng(0).normal(size=(6, 3, 3)).astype(np.float32)
        np.testing.assert_array_equal(fs_project(student, "res2", m).data, fs_project(teacher, "res2", m).data)


def tiny_search(n_loc=8, layers=("res2", "res3", "res4"), cross=False, seed=0):
    rng = np.random.default_rng(seed)
    arrays = bb.init_backbone(rng, (4, 8, 16))
    for layer, c in zip(("res2", "res3", "res4"), (4, 8, 16)):
        arrays.update(init_fs_head(rng, layer, c, 10, 0.5, 6))
    student = bb.to_tensors(arrays)
    teacher = make_teacher(student)
    b = 2
    g = rng.normal(size=(2 * b, 3, 16, 16)).astype(np.float32)
    n_q = 2 if cross else n_loc
    with T.no_grad():
        t_feats = bb.encode(teacher, g)
    with ComputationRecord() as rec:
        q_feats = bb.encode(student, g if cross else rng.normal(size=(n_loc * b, 3, 8, 8)).astype(np.float32))
        pairs = feature_search(q_feats, t_feats, student, teacher, layers, n_q, cross)
    return pairs, student, teacher, rec


class TestFeatureSearch:
    def test_pair_count(self):
        pairs, *_ = tiny_search(n_loc=8)
        assert sum(p.n_pairs for p in pairs.values()) == 48

    def test_cross_mode_uses_other_global(self):
        pairs, *_ = tiny_search(cross=True, layers=("res3",))
        p = pairs["res3"]
        assert p.n_pairs == 2 and not p.valid(0, 0) and p.valid(1, 0)

    def test_empty_layers(self):
        pairs, *_ = tiny_search(layers=())
        per, total = fs_loss(pairs, {}, 0.1, 0.04)
        assert pairs == {} and total.item() == 0.0

    def test_teacher_gets_no_gradient(self):
        pairs, student, teacher, rec = tiny_search(n_loc=2, layers=("res2", "res4"))
        centers = {k: np.zeros(10, np.float32) for k in pairs}
        with rec:
            _, total = fs_loss(pairs, centers, 0.1, 0.04)
        T.backward(total, rec)
        assert all(p.grad is None for p in teacher.values())
        assert np.abs(student["fs.res2.conv1.w"].grad).sum() > 0

    def test_pairs_teacher_used_respects_mask(self):
        t = np.arange(2 * 2 * 1 * 3, dtype=np.float32).reshape(2, 2, 1, 3)
        p = FsPairs("res2", Tensor(np.zeros((2, 1, 3))), t, ~np.eye(2, dtype=bool))
        np.testing.assert_array_equal(p.teacher_used(), np.stack([t[0, 1], t[1, 0]]))
