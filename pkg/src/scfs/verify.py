"""Gradient verification on a micro configuration of the full training loss."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .ema import CenterState
from .tensor import Tensor

MICRO = TrainConfig(
    batch_size=2, widths=(4, 8), K=16, K_fs=16, hidden=16, bottleneck=8, fs_fc_hidden=8, fs_ratio=0.25,
    n_locals=2, layers=("res2", "res3"), global_size=8, local_size=8, seed=3,
)


def micro_problem(cfg: TrainConfig = MICRO, seed: int = 0):
    """Random views, a perturbed teacher and non-zero centers for ``cfg``."""
    from .trainer import TrainState

    rng = np.random.default_rng(seed)
    state = TrainState.initial(cfg)
    # zero biases put GN outputs and head inputs exactly at kinks of relu / l2_normalize
    for k, p in state.student.items():
        if k.endswith(".b"):
            p.data = rng.normal(0, 0.1, p.shape).astype(np.float32)
    for p in state.teacher.values():
        p.data = (p.data + rng.normal(0, 0.05, p.shape)).astype(np.float32)
    state.centers = CenterState(
        rng.normal(0, 0.1, cfg.K).astype(np.float32),
        {layer: rng.normal(0, 0.1, cfg.K_fs).astype(np.float32) for layer in cfg.fs_layers},
    )
    g = rng.uniform(0, 1, (2, cfg.batch_size, 3, cfg.global_size, cfg.global_size))
    loc = rng.uniform(0, 1, (cfg.effective_locals, cfg.batch_size, 3, cfg.local_size, cfg.local_size))
    return state, g, loc


def flat_loss_fn(state, g_views, l_views, cfg: TrainConfig = MICRO, tau_t: float = 0.05):
    """Return ``(fn, theta0)`` where ``fn(theta)`` is the total loss as a function of the flat student parameters.

    Teacher targets (including the feature-search targets, whose queries come
    from the student) are frozen at ``theta0``: they are stop-gradient
    quantities, so the analytic gradient treats them as constants.
    """
    from .trainer import _forward_losses

    names = list(state.student)
    shapes = [state.student[k].shape for k in names]
    sizes = [int(np.prod(s)) for s in shapes]
    theta0 = np.concatenate([state.student[k].data.ravel().astype(np.float64) for k in names])

    with T.default_dtype(np.float64), T.no_grad():
        _, t_logits, pairs = _forward_losses(
            {k: Tensor(v.data.astype(np.float64)) for k, v in state.student.items()},
            {k: Tensor(v.data.astype(np.float64)) for k, v in state.teacher.items()},
            state.centers, g_views, l_views, cfg, tau_t)
    frozen = (t_logits, {layer: p.teacher for layer, p in pairs.items()})
    teacher64 = {k: Tensor(v.data.astype(np.float64)) for k, v in state.teacher.items()}

    def fn(theta: Tensor) -> Tensor:
        params = {}
        off = 0
        for k, shape, n in zip(names, shapes, sizes):
            params[k] = T.reshape(theta[off : off + n], shape)
            off += n
        dtype = theta.dtype
        terms, _, _ = _forward_losses(params, teacher64, state.centers, g_views.astype(dtype),
                                      l_views.astype(dtype), cfg, tau_t, frozen=frozen)
        return terms[-1]

    return fn, theta0


def micro_gradcheck(analytic_dtype=np.float64, max_coords: int | None = None, seed: int = 0,
                    cfg: TrainConfig = MICRO) -> float:
    """Max relative gradient error of the full loss on the micro configuration."""
    state, g, loc = micro_problem(cfg, seed)
    fn, theta0 = flat_loss_fn(state, g, loc, cfg)
    coords = None
    if max_coords is not None and max_coords < theta0.size:
        coords = np.random.default_rng(seed).choice(theta0.size, max_coords, replace=False)
    step = 1e-6
    return T.grad_check(fn, theta0, step, analytic_dtype=analytic_dtype, coords=coords)


# ---------------------------------------------------------------- per-primitive checks


def _split(theta: Tensor, shapes) -> list:
    out, off = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        out.append(T.reshape(theta[off : off + n], shape))
        off += n
    return out


def _case(shapes, body, sample=None):
    size = sum(int(np.prod(s)) for s in shapes)

    def fn(theta, probe):
        out = body(*_split(theta, shapes))
        w = Tensor(probe[: int(np.prod(out.shape))].reshape(out.shape).astype(out.dtype))
        return T.tsum(T.mul(out, w))

    return size, fn, sample


def _away_from_zero(rng, n):
    x = rng.uniform(0.1, 1.5, n)
    return x * rng.choice([-1.0, 1.0], n)


def primitive_cases() -> dict:
    """name -> (flat size, fn(theta, probe) -> scalar, optional point sampler).

    Each case contracts the op output with a fixed random probe so every
    output element contributes to the checked scalar.
    """
    k32 = (2, 3, 3, 3)
    return {
        "add": _case([(3, 4), (4,)], T.add),
        "sub": _case([(3, 4), (3, 1)], T.sub),
        "mul": _case([(3, 4), (3, 4)], T.mul),
        "scale": _case([(5,)], lambda x: T.scale(x, -1.7)),
        "neg": _case([(5,)], T.neg),
        "relu": _case([(12,)], T.relu, _away_from_zero),
        "gelu": _case([(12,)], T.gelu),
        "exp": _case([(6,)], T.exp),
        "log": _case([(6,)], T.log, lambda rng, n: rng.uniform(0.2, 3.0, n)),
        "sum": _case([(3, 4)], lambda x: T.tsum(x, axis=1)),
        "mean": _case([(3, 4)], lambda x: T.mean(x, axis=0)),
        "reshape": _case([(3, 4)], lambda x: T.reshape(x, (2, 6))),
        "transpose": _case([(2, 3, 4)], lambda x: T.transpose(x, (2, 0, 1))),
        "concat": _case([(2, 3), (1, 3)], lambda a, b: T.concat([a, b], axis=0)),
        "getitem": _case([(4, 5)], lambda x: x[1:3, ::2]),
        "getitem_fancy": _case([(4, 3)], lambda x: x[np.array([0, 2, 2])]),
        "matmul": _case([(3, 4), (4, 2)], T.matmul),
        "linear": _case([(3, 4), (5, 4), (5,)], T.linear),
        "weight_norm_linear": _case([(3, 4), (5, 4)], T.weight_norm_linear),
        "conv2d": _case([(2, 3, 5, 5), k32], lambda x, k: T.conv2d(x, k, stride=2, padding=1)),
        "conv2d_1x1": _case([(1, 2, 3, 3), (3, 2, 1, 1)], lambda x, k: T.conv2d(x, k)),
        "global_avg_pool": _case([(2, 3, 4, 4)], T.global_avg_pool),
        "softmax_temp": _case([(3, 5)], lambda x: T.softmax_temp(x, 0.5)),
        "log_softmax_temp": _case([(3, 5)], lambda x: T.log_softmax_temp(x, 0.1)),
        "l2_normalize": _case([(3, 4)], lambda x: T.l2_normalize(x, axis=1)),
        "group_norm": _case([(2, 4, 3, 3), (4,), (4,)], lambda x, g, b: T.group_norm(x, 2, g, b)),
    }


def primitive_gradchecks(n_points: int = 10, seed: int = 0, analytic_dtype=np.float64) -> dict:
    """Max relative gradient error of every primitive over ``n_points`` random points."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, (size, fn, sample) in primitive_cases().items():
        probe = rng.normal(size=256)
        worst = 0.0
        for _ in range(n_points):
            point = sample(rng, size) if sample else rng.normal(size=size)
            worst = max(worst, T.grad_check(lambda th: fn(th, probe), point, 1e-6, analytic_dtype))
        out[name] = worst
    return out
