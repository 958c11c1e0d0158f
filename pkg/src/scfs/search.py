"""Feature search: attention of local queries over global teacher feature maps.

For a layer ``i`` the local student map is average-pooled into a query vector,
its cosine similarity with every position of a global teacher map gives the
attention map, and the teacher map reweighted by that attention is the
feature-level augmentation. Student maps and augmented teacher maps are then
projected by the layer's student and teacher heads respectively.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeatureMaps, Params, _conv_init, _fc_init
from .tensor import DimensionError, Tensor

EPS = 1e-12
ATTENTION_MODES = ("cosine", "softmax")
SOFTMAX_TEMP = 0.1


def fs_hidden_channels(channels: int, ratio: float) -> int:
    return max(1, int(round(channels * ratio)))


def init_fs_head(rng: np.random.Generator, layer: str, channels: int, out_dim: int = 256,
                 ratio: float = 0.25, fc_hidden: int = 256) -> dict:
    """Residual conv block (1x1 -> 3x3 -> 1x1), pooling, then two FC layers (the second weight-normalized)."""
    h = fs_hidden_channels(channels, ratio)
    pre = f"fs.{layer}"
    return {
        f"{pre}.conv1.w": _conv_init(rng, h, channels, 1),
        f"{pre}.conv1.b": np.zeros(h),
        f"{pre}.conv2.w": _conv_init(rng, h, h, 3),
        f"{pre}.conv2.b": np.zeros(h),
        f"{pre}.conv3.w": _conv_init(rng, channels, h, 1) * 0.5,
        f"{pre}.conv3.b": np.zeros(channels),
        f"{pre}.fc1.w": _fc_init(rng, fc_hidden, channels),
        f"{pre}.fc1.b": np.zeros(fc_hidden),
        f"{pre}.fc2.v": _unit_rows(rng, out_dim, fc_hidden),
    }


def _unit_rows(rng, n_out, n_in):
    v = rng.normal(0.0, 1.0, (n_out, n_in))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _as_batched(x: Tensor, ndim: int) -> tuple[Tensor, bool]:
    if x.ndim == ndim - 1:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def attention_map(query, global_map, eps: float = EPS, mode: str = "cosine") -> Tensor:
    """Cosine similarity between a query vector and every position of a map.

    ``query`` is (C,) or (B, C); ``global_map`` is (C, H, W) or (B, C, H, W).
    The map is treated as a constant. Returns (H, W) or (B, H, W).
    ``mode="softmax"`` instead normalizes the cosines over positions
    (temperature ``SOFTMAX_TEMP``); the raw cosine is the default.
    """
    if mode not in ATTENTION_MODES:
        raise ValueError(f"attention mode must be one of {ATTENTION_MODES}, got {mode!r}")
    q = query if isinstance(query, Tensor) else Tensor(query)
    f = (global_map if isinstance(global_map, Tensor) else Tensor(global_map)).detach()
    q, single = _as_batched(q, 2)
    f, _ = _as_batched(f, 4)
    if q.shape[1] != f.shape[1]:
        raise DimensionError(f"query has {q.shape[1]} channels, map has {f.shape[1]}")
    if q.shape[0] != f.shape[0]:
        raise DimensionError("query and map batch sizes differ")
    qn = T.reshape(T.l2_normalize(q, axis=1, eps=eps), q.shape + (1, 1))
    fn = T.l2_normalize(f, axis=1, eps=eps)
    a = T.tsum(T.mul(qn, fn), axis=1)
    if mode == "softmax":
        hw = a.shape[1:]
        a = T.reshape(T.softmax_temp(T.reshape(a, (a.shape[0], -1)), SOFTMAX_TEMP, axis=1), (a.shape[0],) + hw)
    return T.reshape(a, a.shape[1:]) if single else a


def feature_augment(attention, global_map) -> Tensor:
    """Scale every spatial position of the map by its attention weight."""
    a = attention if isinstance(attention, Tensor) else Tensor(attention)
    f = global_map if isinstance(global_map, Tensor) else Tensor(global_map)
    if a.shape[-2:] != f.shape[-2:]:
        raise DimensionError(f"attention {a.shape[-2:]} and map {f.shape[-2:]} spatial sizes differ")
    a4 = T.reshape(a, a.shape[:-2] + (1,) + a.shape[-2:])
    return T.mul(a4, f)


def fs_project(params: Params, layer: str, feature_map) -> Tensor:
    """Project a (C, H, W) or (B, C, H, W) map with the layer's feature-search head."""
    pre = f"fs.{layer}"
    x = feature_map if isinstance(feature_map, Tensor) else Tensor(feature_map)
    x, single = _as_batched(x, 4)
    if x.shape[1] != params[f"{pre}.conv1.w"].shape[1]:
        raise DimensionError(f"{layer} head expects {params[f'{pre}.conv1.w'].shape[1]} channels, got {x.shape[1]}")

    def conv(h, name, pad):
        b = T.reshape(params[f"{pre}.{name}.b"], (1, -1, 1, 1))
        return T.add(T.conv2d(h, params[f"{pre}.{name}.w"], 1, pad), b)

    h = T.relu(conv(x, "conv1", 0))
    h = T.relu(conv(h, "conv2", 1))
    h = T.relu(T.add(conv(h, "conv3", 0), x))
    h = T.global_avg_pool(h)
    h = T.gelu(T.linear(h, params[f"{pre}.fc1.w"], params[f"{pre}.fc1.b"]))
    # bounded logits, as in the main head: L2-normalized input to a weight-normalized layer
    out = T.weight_norm_linear(T.l2_normalize(h, axis=-1), params[f"{pre}.fc2.v"])
    return T.reshape(out, out.shape[1:]) if single else out


@dataclass
class FsPairs:
    """Logits of one layer.

    ``student[n]`` (B, K_fs) is paired with ``teacher[g, n]`` for every global
    ``g`` where ``mask[g, n]`` holds (all pairs when ``mask`` is None).
    """

    layer: str
    student: Tensor  # (N, B, K_fs)
    teacher: np.ndarray  # (2, N, B, K_fs), constant
    mask: np.ndarray | None = None  # (2, N) bool

    def valid(self, g: int, n: int) -> bool:
        return self.mask is None or bool(self.mask[g, n])

    @property
    def n_pairs(self) -> int:
        if self.mask is None:
            return self.teacher.shape[0] * self.teacher.shape[1]
        return int(self.mask.sum())

    def teacher_used(self) -> np.ndarray:
        """Teacher logits of the valid pairs, stacked as (P, B, K_fs)."""
        if self.mask is None:
            return self.teacher.reshape((-1,) + self.teacher.shape[2:])
        return self.teacher[self.mask]


def search_teacher_side(teacher: Params, layer: str, queries: np.ndarray, global_maps: np.ndarray,
                        mode: str = "cosine") -> np.ndarray:
    """Teacher logits for every (global, local) combination of one layer.

    ``queries`` is (N, B, C); ``global_maps`` is (2, B, C, H, W).
    Returns (2, N, B, K_fs).
    """
    n, b, c = queries.shape
    n_glob = global_maps.shape[0]
    with T.no_grad():
        q = Tensor(np.broadcast_to(queries[None], (n_glob, n, b, c)).reshape(-1, c))
        maps = np.broadcast_to(global_maps[:, None], (n_glob, n) + global_maps.shape[1:])
        f = Tensor(np.ascontiguousarray(maps).reshape((-1,) + global_maps.shape[2:]))
        aug = feature_augment(attention_map(q, f, mode=mode), f)
        out = fs_project(teacher, layer, aug).data
    return out.reshape(n_glob, n, b, -1)


def feature_search(query_maps: FeatureMaps, global_maps: FeatureMaps, student: Params, teacher: Params,
                   layers, n_queries: int, cross: bool = False, mode: str = "cosine") -> dict[str, FsPairs]:
    """Run feature search on every layer of ``layers``.

    ``query_maps`` are student features of the ``n_queries * B`` stacked query
    views (view-major order): the local views normally, or the two global
    views when ``cross`` is set, in which case view ``a`` only searches the
    other global's map. ``global_maps`` are teacher features of the 2*B
    stacked global views. Teacher-side quantities carry no gradient.
    """
    out = {}
    if n_queries == 0:
        return out
    for layer in layers:
        s_map = query_maps[layer]
        b = s_map.shape[0] // n_queries
        queries = T.global_avg_pool(s_map.detach()).data.reshape(n_queries, b, -1)
        g_map = global_maps[layer].data
        g_map = g_map.reshape((2, b) + g_map.shape[1:])
        t_logits = search_teacher_side(teacher, layer, queries, g_map, mode)
        s_logits = fs_project(student, layer, s_map)
        mask = ~np.eye(2, dtype=bool) if cross else None
        out[layer] = FsPairs(layer, T.reshape(s_logits, (n_queries, b, -1)), t_logits, mask)
    return out
