"""Dense tensors with reverse-mode automatic differentiation.

Operations executed while a :class:`ComputationRecord` is active are appended
to it in execution order, which is already a topological order. ``backward``
walks the record in reverse and accumulates gradients into every leaf tensor
that has ``requires_grad`` set. Outside an active record (or inside
:func:`no_grad`) operations only compute values.

Training runs in float32; gradient checking promotes to float64.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ComputationRecord",
    "DimensionError",
    "ParameterError",
    "ContractError",
    "NumericError",
    "no_grad",
    "default_dtype",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "relu",
    "gelu",
    "exp",
    "log",
    "tsum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "getitem",
    "conv2d",
    "global_avg_pool",
    "softmax_temp",
    "log_softmax_temp",
    "l2_normalize",
    "group_norm",
    "linear",
    "weight_norm_linear",
]


class DimensionError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


_state = threading.local()
_ids = itertools.count(1)

# Op outputs are checked for NaN/Inf; the trainer may switch this off for speed.
CHECK_FINITE = True


def _records() -> list:
    if not hasattr(_state, "records"):
        _state.records = []
        _state.grad_enabled = True
        _state.dtype = np.float32
    return _state.records


def _active_record() -> "ComputationRecord | None":
    recs = _records()
    if recs and _state.grad_enabled:
        return recs[-1]
    return None


@contextlib.contextmanager
def no_grad():
    """Suspend recording; values computed inside carry no history."""
    _records()
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def default_dtype(dtype):
    """Change the dtype new tensors are created with (float32 or float64)."""
    _records()
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def get_default_dtype():
    _records()
    return _state.dtype


class Tensor:
    """A dense array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        is_array = isinstance(data, np.ndarray)
        arr = np.asarray(data)
        if dtype is None:
            # float arrays keep their precision; lists and scalars take the default
            dtype = arr.dtype if is_array and arr.dtype in (np.float32, np.float64) else get_default_dtype()
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        if not np.all(np.isfinite(self.data)):
            raise NumericError("tensor data contains NaN or Inf")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.node_id = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class ComputationRecord:
    """Ordered log of differentiable operations.

    Use as a context manager; operations run inside the block are recorded.
    A record belongs to one thread and one training step.
    """

    def __init__(self):
        self.ops: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []
        self._owner = None

    def __enter__(self) -> "ComputationRecord":
        _records().append(self)
        self._owner = threading.get_ident()
        return self

    def __exit__(self, *exc) -> None:
        recs = _records()
        if recs and recs[-1] is self:
            recs.pop()

    def __len__(self) -> int:
        return len(self.ops)

    def append(self, inputs: tuple, output: Tensor, rule: Callable) -> None:
        output.node_id = next(_ids)
        for t in inputs:
            if t.requires_grad and t.node_id is None:
                t.node_id = next(_ids)
        self.ops.append((inputs, output, rule))


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor._wrap(np.asarray(x, dtype=dtype or get_default_dtype()), False)


def _emit(out: np.ndarray, inputs: tuple, rule: Callable) -> Tensor:
    if CHECK_FINITE and not np.isfinite(out.sum()):
        raise NumericError(f"non-finite value produced (output shape {out.shape})")
    rec = _active_record()
    needs = rec is not None and any(t.requires_grad for t in inputs)
    t = Tensor._wrap(out, needs)
    if needs:
        rec.append(inputs, t, rule)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data + b.data

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(out, (a, b), rule)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data - b.data

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(out, (a, b), rule)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data * b.data

    def rule(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), rule)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return _emit(-x.data, (x,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _emit(out, (x,), lambda g: (g * (out > 0),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    d = x.data
    c = d.dtype.type(_GELU_C)
    k = d.dtype.type(0.044715)
    half = d.dtype.type(0.5)
    d2 = d * d
    inner = c * d * (1 + k * d2)
    th = np.tanh(inner)
    out = half * d * (1 + th)

    def rule(g):
        dinner = c * (1 + 3 * k * d2)
        return (g * (half * (1 + th) + half * d * (1 - th * th) * dinner),)

    return _emit(out, (x,), rule)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")
    return _emit(np.log(x.data), (x,), lambda g: (g / x.data,))


# ---------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(out, (x,), rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(tsum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _emit(np.ascontiguousarray(out), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, xs, rule)


def getitem(x: Tensor, idx) -> Tensor:
    out = np.ascontiguousarray(x.data[idx])

    def rule(g):
        full = np.zeros_like(x.data)
        if _is_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _emit(out, (x,), rule)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit(out, (a, b), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight width {weight.shape[1]}")
    out = matmul(x, transpose(weight))
    return add(out, bias) if bias is not None else out


def weight_norm_linear(x: Tensor, direction: Tensor) -> Tensor:
    """Linear layer whose rows are the unit-normalized rows of ``direction`` (gain fixed at 1)."""
    return linear(x, l2_normalize(direction, axis=1))


# ---------------------------------------------------------------- convolution


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    # columns ordered (kh, kw, c) so channel runs stay contiguous
    xh = x.transpose(0, 2, 3, 1)
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(xh, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    b, ho, wo, c = win.shape[:4]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, kh * kw * c)
    return cols, ho, wo


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and (C_out, C_in, kH, kW) kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and kernel")
    if stride < 1 or padding < 0:
        raise ParameterError("conv2d: stride must be >= 1 and padding >= 0")
    b, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError("conv2d: kernel larger than padded input")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    kmat = kernel.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = (cols @ kmat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def rule(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = None
        if kernel.requires_grad:
            gk = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kmat).reshape(b, ho, wo, kh, kw, c)
            hp, wp = h + 2 * padding, w + 2 * padding
            gpad = np.zeros((b, hp, wp, c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, :, i, j]
            gx = gpad[:, padding : padding + h, padding : padding + w].transpose(0, 3, 1, 2)
        return gx, gk

    return _emit(out, (x, kernel), rule)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: (B, C, H, W) -> (B, C)."""
    if x.ndim != 4:
        raise DimensionError("global_avg_pool expects (B, C, H, W)")
    h, w = x.shape[2:]
    if h < 1 or w < 1:
        raise DimensionError("global_avg_pool: empty spatial dims")
    inv = x.dtype.type(1.0 / (h * w))
    out = x.data.mean(axis=(2, 3))

    def rule(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], x.shape).copy(),)

    return _emit(out, (x,), rule)


# ---------------------------------------------------------------- normalizations


def softmax_temp(logits: Tensor, tau: float, axis: int = -1) -> Tensor:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = logits.data / logits.dtype.type(tau)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return ((p * (g - (g * p).sum(axis=axis, keepdims=True))) / logits.dtype.type(tau),)

    return _emit(p, (logits,), rule)


def log_softmax_temp(logits: Tensor, tau: float, axis: int = -1) -> Tensor:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = logits.data / logits.dtype.type(tau)
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def rule(g):
        p = np.exp(out)
        return ((g - p * g.sum(axis=axis, keepdims=True)) / logits.dtype.type(tau),)

    return _emit(out, (logits,), rule)


def l2_normalize(v: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """``v / max(||v||, eps)``; zero vectors map to zero."""
    norm = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, v.dtype.type(eps))
    out = v.data / denom

    def rule(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(big, g - out * proj, g) / denom,)

    return _emit(out, (v,), rule)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample normalization over channel groups of an NCHW map, then affine."""
    b, c = x.shape[:2]
    if c % groups:
        raise DimensionError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (xc * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def rule(g):
        ggamma = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gbeta = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = (g * gamma.data.reshape(bshape)).reshape(b, groups, -1)
            xh = xhat.reshape(b, groups, -1)
            gx = inv * (gh - gh.mean(axis=2, keepdims=True) - xh * (gh * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(x.shape)
        return gx, ggamma, gbeta

    return _emit(out, (x, gamma, beta), rule)


# ---------------------------------------------------------------- backprop


def backward(loss: Tensor, record: ComputationRecord) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every recorded leaf.

    Returns a mapping from each leaf tensor that received a gradient to that
    gradient. Detached inputs never appear in it.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if record._owner not in (None, threading.get_ident()):
        raise ContractError("computation record used from a different thread")
    grads: dict[int, np.ndarray] = {}
    if loss.node_id is None or not loss.requires_grad:
        return {}
    grads[loss.node_id] = np.ones_like(loss.data)
    produced = {out.node_id for _, out, _ in record.ops}
    leaves: dict[int, Tensor] = {}
    for inputs, out, rule in reversed(record.ops):
        g = grads.pop(out.node_id, None)
        if g is None:
            continue
        in_grads = rule(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = t.node_id
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    result = {}
    for key, t in leaves.items():
        g = np.asarray(grads[key], dtype=t.dtype).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
        result[t] = g
    return result


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-6,
    analytic_dtype=np.float64,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    The finite-difference oracle always evaluates ``fn`` in float64. The
    analytic gradient is computed in ``analytic_dtype`` (float32 exercises the
    training precision). ``coords`` restricts the check to a subset of flat
    coordinates.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with default_dtype(analytic_dtype):
        x = Tensor(base.astype(analytic_dtype), requires_grad=True)
        with ComputationRecord() as rec:
            y = fn(x)
        backward(y, rec)
        ga = np.zeros(base.size) if x.grad is None else x.grad.astype(np.float64).ravel()

    def f64(arr):
        with default_dtype(np.float64), no_grad():
            return float(fn(Tensor(arr, dtype=np.float64)).data.reshape(()))

    idx = range(base.size) if coords is None else coords
    err = 0.0
    flat = base.ravel()
    for i in idx:
        old = flat[i]
        flat[i] = old + step
        hi = f64(base)
        flat[i] = old - step
        lo = f64(base)
        flat[i] = old
        gn = (hi - lo) / (2 * step)
        err = max(err, abs(ga[i] - gn) / max(1.0, abs(ga[i]), abs(gn)))
    return err
