"""Cross-entropy contrast terms between teacher targets and student predictions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .search import FsPairs
from .tensor import NumericError, Tensor


@dataclass
class LossBreakdown:
    """Scalar loss terms of one step. ``L_d``, ``L_fs`` and ``L`` are sums of the others."""

    L_g: np.float32
    L_l: np.float32
    L_d: np.float32
    L_fs_layers: dict = field(default_factory=dict)
    L_fs: np.float32 = np.float32(0.0)
    L: np.float32 = np.float32(0.0)

    def as_row(self) -> list:
        return [self.L_g, self.L_l, self.L_d, *self.L_fs_layers.values(), self.L_fs, self.L]


def teacher_probs(t, center, tau_t: float) -> np.ndarray:
    """Centered, sharpened teacher distribution (a constant)."""
    t = t.data if isinstance(t, Tensor) else np.asarray(t)
    with T.no_grad():
        return T.softmax_temp(Tensor(t - center), tau_t).data


def _check(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")


def cross_entropy_h(t, s: Tensor, center, tau: float, tau_t: float) -> Tensor:
    """Batch mean of ``-sum_k softmax((t - C)/tau_t)_k * log softmax(s/tau)_k``; ``t`` is never differentiated."""
    t_arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    _check(t_arr, "teacher logits")
    _check(s.data, "student logits")
    if t_arr.shape != s.shape:
        raise T.DimensionError(f"teacher {t_arr.shape} and student {s.shape} logits differ in shape")
    p = Tensor._wrap(teacher_probs(t_arr, center, tau_t).astype(s.dtype), False)
    per = T.neg(T.tsum(T.mul(p, T.log_softmax_temp(s, tau)), axis=-1))
    return T.mean(per)


def _zero(like: Tensor | None = None) -> Tensor:
    dtype = like.dtype if like is not None else T.get_default_dtype()
    return Tensor._wrap(np.zeros((), dtype=dtype), False)


def _sum(terms: list, like=None) -> Tensor:
    if not terms:
        return _zero(like)
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return acc


def data_loss(student_globals, teacher_globals, student_locals, center, tau: float, tau_t: float,
              normalize_locals: bool = False):
    """Global-global and local-global contrast.

    ``student_globals``/``teacher_globals`` are pairs of (B, K) logits for the
    two global views, ``student_locals`` a sequence of (B, K) logits. Returns
    tensors (L_g, L_l, L_d) with L_d = L_g + L_l.
    """
    s1, s2 = student_globals
    t1, t2 = teacher_globals
    half = 0.5
    l_g = T.add(T.scale(cross_entropy_h(t1, s2, center, tau, tau_t), half),
                T.scale(cross_entropy_h(t2, s1, center, tau, tau_t), half))
    terms = []
    for sl in student_locals:
        terms.append(T.add(T.scale(cross_entropy_h(t1, sl, center, tau, tau_t), half),
                           T.scale(cross_entropy_h(t2, sl, center, tau, tau_t), half)))
    l_l = _sum(terms, s1)
    if normalize_locals and terms:
        l_l = T.scale(l_l, 1.0 / len(terms))
    return l_g, l_l, T.add(l_g, l_l)


def fs_layer_loss(pairs: FsPairs, center, tau: float, tau_t: float, normalize_locals: bool = False) -> Tensor:
    """Sum over query views of the half-weighted contrast with each paired global."""
    n_glob, n = pairs.teacher.shape[:2]
    terms = []
    for i in range(n):
        s = pairs.student[i]
        parts = [T.scale(cross_entropy_h(pairs.teacher[g, i], s, center, tau, tau_t), 0.5)
                 for g in range(n_glob) if pairs.valid(g, i)]
        if parts:
            terms.append(_sum(parts))
    out = _sum(terms, pairs.student)
    if normalize_locals and terms:
        out = T.scale(out, 1.0 / len(terms))
    return out


def fs_loss(all_pairs: dict, centers: dict, tau: float, tau_t: float, normalize_locals: bool = False):
    """Returns (per-layer dict of tensors, total tensor); an empty layer set gives zero."""
    per = {layer: fs_layer_loss(p, centers[layer], tau, tau_t, normalize_locals) for layer, p in all_pairs.items()}
    return per, _sum(list(per.values()))


def total_loss(l_d: Tensor, l_fs: Tensor) -> Tensor:
    return T.add(l_d, l_fs)


def breakdown(l_g: Tensor, l_l: Tensor, l_d: Tensor, per_layer: dict, l_fs: Tensor, total: Tensor) -> LossBreakdown:
    f32 = np.float32
    return LossBreakdown(
        L_g=f32(l_g.item()), L_l=f32(l_l.item()), L_d=f32(l_d.item()),
        L_fs_layers={k: f32(v.item()) for k, v in per_layer.items()},
        L_fs=f32(l_fs.item()), L=f32(total.item()),
    )
