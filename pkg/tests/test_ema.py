import numpy as np
import pytest

from scfs.ema import CenterState, center_update, ema_update, make_teacher, momentum_at
from scfs.tensor import ContractError, Tensor


def params(value, dtype=np.float64):
    return {"a": Tensor(np.full((2, 3), value, dtype), dtype=dtype), "b": Tensor(np.full(4, value, dtype), dtype=dtype)}


class TestEma:
    def test_momentum_one_keeps_teacher(self):
        t = ema_update(params(1.0), params(0.25), 1.0)
        assert all((v.data == 0.25).all() for v in t.values())

    def test_momentum_zero_copies_student(self):
        s = {"a": Tensor(np.random.default_rng(0).normal(size=5))}
        t = ema_update(s, {"a": Tensor(np.zeros(5))}, 0.0)
        assert t["a"].data.tobytes() == s["a"].data.tobytes()

    def test_direct_value(self):
        t = ema_update(params(1.0), params(0.0), 0.9)
        np.testing.assert_allclose(t["a"].data, 0.1, rtol=1e-15)

    def test_geometric_decay(self):
        student = params(0.3)
        teacher = params(-1.7)
        gap0 = 2.0
        for t in range(1, 21):
            ema_update(student, teacher, 0.9)
            gap = np.abs(teacher["a"].data - 0.3)
            np.testing.assert_allclose(gap, 0.9 ** t * gap0, rtol=1e-12)

    def test_structure_mismatch(self):
        with pytest.raises(ContractError):
            ema_update(params(1.0), {"a": Tensor(np.zeros((2, 3)))}, 0.5)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            ema_update({"a": Tensor(np.zeros(3))}, {"a": Tensor(np.zeros(4))}, 0.5)

    def test_teacher_is_a_frozen_copy(self):
        s = {"a": Tensor(np.ones(3), requires_grad=True)}
        t = make_teacher(s)
        assert not t["a"].requires_grad and t["a"].data is not s["a"].data
        np.testing.assert_array_equal(t["a"].data, s["a"].data)

    def test_momentum_ramp_endpoints(self):
        assert momentum_at(0, 100, 0.996) == pytest.approx(0.996)
        assert momentum_at(100, 100, 0.996) == 1.0
        assert momentum_at(50, 100, 0.996) == pytest.approx(0.998)


class TestCenter:
    def test_momentum_one(self):
        c = np.array([0.5, -1.0], np.float32)
        np.testing.assert_array_equal(center_update(c, np.ones((3, 2)), 1.0), c)

    def test_momentum_zero(self):
        out = np.random.default_rng(0).normal(size=(6, 3)).astype(np.float32)
        np.testing.assert_array_equal(center_update(np.zeros(3, np.float32), out, 0.0), out.mean(axis=0))

    def test_direct_value(self):
        out = center_update(np.zeros(2, np.float32), np.array([[1.0, 0.0], [1.0, 0.0]]), 0.9)
        np.testing.assert_allclose(out, [0.1, 0.0], rtol=1e-6)

    def test_mean_over_leading_axes(self):
        out = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        np.testing.assert_allclose(center_update(np.zeros(4, np.float32), out, 0.0), out.reshape(6, 4).mean(0))

    def test_zeros_has_slot_per_layer(self):
        cs = CenterState.zeros(8, 5, ("res2", "res4"))
        assert cs.main.shape == (8,) and set(cs.fs) == {"res2", "res4"} and cs.fs["res2"].shape == (5,)
