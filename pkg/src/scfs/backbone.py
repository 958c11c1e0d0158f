"""Multi-stage convolutional encoder and the main projection head.

Parameters live in flat ``dict[str, Tensor]`` mappings keyed by dotted names,
so student, teacher, optimizer state and checkpoints all share one layout.
Stage ``s`` of the trunk is exposed as ``res{s+2}`` (res2, res3, res4, ...).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, ParameterError, Tensor

Params = dict  # dict[str, Tensor]


def stage_names(n_stages: int) -> list[str]:
    return [f"res{s + 2}" for s in range(n_stages)]


def norm_groups(channels: int, max_groups: int = 8) -> int:
    return math.gcd(channels, max_groups)


@dataclass
class FeatureMaps:
    maps: dict  # stage name -> Tensor[B, C, H, W]
    trunk: Tensor  # Tensor[B, C_last]

    def __getitem__(self, name: str) -> Tensor:
        return self.maps[name]


def _conv_init(rng, c_out, c_in, k):
    std = math.sqrt(2.0 / (c_in * k * k))
    return rng.normal(0.0, std, (c_out, c_in, k, k))


def _fc_init(rng, n_out, n_in):
    return rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_out, n_in))


def _check_widths(widths) -> None:
    if len(widths) == 0 or any(w <= 0 for w in widths):
        raise ParameterError(f"stage widths must be positive, got {tuple(widths)}")
    if any(b <= a for a, b in zip(widths, widths[1:])):
        raise ParameterError(f"stage widths must be strictly increasing, got {tuple(widths)}")


def init_backbone(rng: np.random.Generator, widths, in_channels: int = 3) -> Params:
    _check_widths(widths)
    p = {}
    c_in = in_channels
    for name, w in zip(stage_names(len(widths)), widths):
        p[f"backbone.{name}.conv1.w"] = _conv_init(rng, w, c_in, 3)
        p[f"backbone.{name}.conv1.b"] = np.zeros(w)
        p[f"backbone.{name}.norm1.g"] = np.ones(w)
        p[f"backbone.{name}.norm1.b"] = np.zeros(w)
        p[f"backbone.{name}.conv2.w"] = _conv_init(rng, w, w, 3)
        p[f"backbone.{name}.conv2.b"] = np.zeros(w)
        p[f"backbone.{name}.norm2.g"] = np.ones(w)
        p[f"backbone.{name}.norm2.b"] = np.zeros(w)
        c_in = w
    return p


def init_main_head(rng: np.random.Generator, in_dim: int, out_dim: int, hidden: int = 512, bottleneck: int = 64) -> Params:
    if min(in_dim, out_dim, hidden, bottleneck) <= 0:
        raise ParameterError("head dimensions must be positive")
    p = {
        "head.fc1.w": _fc_init(rng, hidden, in_dim),
        "head.fc1.b": np.zeros(hidden),
        "head.fc2.w": _fc_init(rng, hidden, hidden),
        "head.fc2.b": np.zeros(hidden),
        "head.fc3.w": _fc_init(rng, bottleneck, hidden),
        "head.fc3.b": np.zeros(bottleneck),
    }
    v = rng.normal(0.0, 1.0, (out_dim, bottleneck))
    p["head.last.v"] = v / np.linalg.norm(v, axis=1, keepdims=True)
    return p


def to_tensors(arrays: dict, requires_grad: bool = True, dtype=np.float32) -> Params:
    return {k: Tensor(np.asarray(v, dtype=dtype), requires_grad=requires_grad) for k, v in arrays.items()}


def init_params(seed: int, widths=(32, 64, 128), K: int = 256, hidden: int = 512, bottleneck: int = 64) -> Params:
    """Deterministic backbone + main-head parameters."""
    rng = np.random.default_rng(seed)
    arrays = init_backbone(rng, widths)
    arrays.update(init_main_head(rng, widths[-1], K, hidden, bottleneck))
    return to_tensors(arrays)


def n_stages(params: Params) -> int:
    return len({k.split(".")[1] for k in params if k.startswith("backbone.")})


def _bias4(b: Tensor) -> Tensor:
    return T.reshape(b, (1, -1, 1, 1))


def _conv_block(params, prefix, x, stride):
    w = params[f"{prefix}.w"]
    return T.add(T.conv2d(x, w, stride=stride, padding=1), _bias4(params[f"{prefix}.b"]))


def _norm(params, prefix, x):
    g = params[f"{prefix}.g"]
    return T.group_norm(x, norm_groups(x.shape[1]), g, params[f"{prefix}.b"])


def encode(params: Params, batch) -> FeatureMaps:
    """Run the trunk; every stage halves the spatial size."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"encode expects (B, 3, H, W), got {x.shape}")
    names = stage_names(n_stages(params))
    stride_total = 2 ** len(names)
    if x.shape[2] % stride_total or x.shape[3] % stride_total:
        raise DimensionError(f"input {x.shape[2]}x{x.shape[3]} not divisible by total stride {stride_total}")
    maps = {}
    for name in names:
        pre = f"backbone.{name}"
        x = T.relu(_norm(params, f"{pre}.norm1", _conv_block(params, f"{pre}.conv1", x, 2)))
        x = T.relu(_norm(params, f"{pre}.norm2", _conv_block(params, f"{pre}.conv2", x, 1)))
        maps[name] = x
    return FeatureMaps(maps=maps, trunk=T.global_avg_pool(x))


def project_main(params: Params, trunk_output: Tensor) -> Tensor:
    """Four-layer head: three GELU-separated FC layers, L2 normalization, weight-normalized output."""
    if trunk_output.shape[-1] != params["head.fc1.w"].shape[1]:
        raise DimensionError(
            f"head expects width {params['head.fc1.w'].shape[1]}, got {trunk_output.shape[-1]}"
        )
    h = T.gelu(T.linear(trunk_output, params["head.fc1.w"], params["head.fc1.b"]))
    h = T.gelu(T.linear(h, params["head.fc2.w"], params["head.fc2.b"]))
    h = T.linear(h, params["head.fc3.w"], params["head.fc3.b"])
    h = T.l2_normalize(h, axis=-1)
    return T.weight_norm_linear(h, params["head.last.v"])
