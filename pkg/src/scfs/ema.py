"""Momentum teacher and output centers."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import Params
from .tensor import ContractError, Tensor


def make_teacher(student: Params) -> Params:
    """Exact non-differentiable copy of the student."""
    return {k: Tensor(v.data.copy(), requires_grad=False) for k, v in student.items()}


def ema_update(student: Params, teacher: Params, momentum: float) -> Params:
    """In place: ``teacher <- momentum * teacher + (1 - momentum) * student``."""
    if student.keys() != teacher.keys():
        missing = set(student) ^ set(teacher)
        raise ContractError(f"student/teacher structure mismatch: {sorted(missing)[:5]}")
    for k, p in student.items():
        t = teacher[k]
        if t.shape != p.shape:
            raise ContractError(f"shape mismatch for {k}: {t.shape} vs {p.shape}")
        if momentum == 1.0:
            continue
        if momentum == 0.0:
            t.data = p.data.copy()
            continue
        m = t.dtype.type(momentum)
        t.data = m * t.data + (1 - m) * p.data
    return teacher


def momentum_at(step: int, total_steps: int, base: float) -> float:
    """Cosine ramp of the teacher momentum from ``base`` to 1."""
    if total_steps <= 0:
        return base
    frac = min(max(step / total_steps, 0.0), 1.0)
    return 1.0 - (1.0 - base) * (math.cos(math.pi * frac) + 1.0) / 2.0


@dataclass
class CenterState:
    main: np.ndarray
    fs: dict = field(default_factory=dict)  # layer -> np.ndarray

    @classmethod
    def zeros(cls, k: int, k_fs: int, layers, dtype=np.float32) -> "CenterState":
        return cls(np.zeros(k, dtype), {layer: np.zeros(k_fs, dtype) for layer in layers})


def center_update(center: np.ndarray, teacher_outputs: np.ndarray, momentum: float) -> np.ndarray:
    """``center <- m * center + (1 - m) * mean over all leading axes of the outputs``."""
    out = np.asarray(teacher_outputs.data if isinstance(teacher_outputs, Tensor) else teacher_outputs)
    batch_mean = out.reshape(-1, out.shape[-1]).mean(axis=0).astype(center.dtype)
    if momentum == 1.0:
        return center.copy()
    if momentum == 0.0:
        return batch_mean
    m = center.dtype.type(momentum)
    return m * center + (1 - m) * batch_mean
