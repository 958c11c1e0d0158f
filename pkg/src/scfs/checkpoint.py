"""Binary checkpoint format.

Layout (little-endian)::

    magic    8 bytes  b"SCFSCKPT"
    version  u32
    count    u32                      number of named blobs
    blobs    count x (u16 name length, name bytes, u64 payload length, float32 payload)
    seed     u64                      RNG state: views and batch order derive from (seed, step)
    step     u64
    epoch    u64
    config   u32 length + UTF-8 ``key = value`` text

Blob names: ``student/<param>``, ``teacher/<param>``, ``velocity/<param>``,
``center/main`` and ``center/fs/<layer>``. Shapes are implied by the config.
"""
from __future__ import annotations

import io
import struct

import numpy as np

from .config import TrainConfig, format_config, parse_config_text
from .ema import CenterState
from .tensor import Tensor
from .trainer import TrainState, init_model

MAGIC = b"SCFSCKPT"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def _blobs(state: TrainState) -> list:
    out = []
    for k, p in state.student.items():
        out.append((f"student/{k}", p.data))
    for k, p in state.teacher.items():
        out.append((f"teacher/{k}", p.data))
    for k, v in state.velocity.items():
        out.append((f"velocity/{k}", v))
    out.append(("center/main", state.centers.main))
    for layer, c in state.centers.fs.items():
        out.append((f"center/fs/{layer}", c))
    return out


def checkpoint_bytes(state: TrainState, cfg: TrainConfig, steps_per_epoch: int = 1) -> bytes:
    buf = io.BytesIO()
    blobs = _blobs(state)
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(blobs)))
    for name, arr in blobs:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
    buf.write(struct.pack("<QQQ", cfg.seed, state.step, state.step // max(1, steps_per_epoch)))
    text = format_config(cfg).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    return buf.getvalue()


def save_checkpoint(path, state: TrainState, cfg: TrainConfig, steps_per_epoch: int = 1) -> None:
    data = checkpoint_bytes(state, cfg, steps_per_epoch)
    with open(path, "wb") as fh:
        fh.write(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated checkpoint at byte offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(data: bytes) -> tuple[TrainState, TrainConfig]:
    r = _Reader(data)
    if r.take(8) != MAGIC:
        raise CheckpointFormatError("bad checkpoint magic")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    blobs = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (plen,) = r.unpack("<Q")
        blobs[name] = np.frombuffer(r.take(plen), dtype="<f4").astype(np.float32)
    seed, step, _epoch = r.unpack("<QQQ")
    (tlen,) = r.unpack("<I")
    cfg = parse_config_text(r.take(tlen).decode("utf-8"))
    if r.pos != len(data):
        raise CheckpointFormatError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    if seed != cfg.seed:
        raise CheckpointFormatError("seed field disagrees with stored config")

    template = init_model(cfg)

    def fill(prefix):
        out = {}
        for k, p in template.items():
            key = f"{prefix}/{k}"
            if key not in blobs:
                raise CheckpointFormatError(f"missing blob {key}")
            arr = blobs[key]
            if arr.size != p.data.size:
                raise CheckpointFormatError(f"blob {key} has {arr.size} values, expected {p.data.size}")
            out[k] = arr.reshape(p.shape)
        return out

    student = {k: Tensor(v, requires_grad=True) for k, v in fill("student").items()}
    teacher = {k: Tensor(v, requires_grad=False) for k, v in fill("teacher").items()}
    velocity = fill("velocity")
    center_keys = ["center/main"] + [f"center/fs/{layer}" for layer in cfg.fs_layers]
    missing = [k for k in center_keys if k not in blobs]
    if missing:
        raise CheckpointFormatError(f"missing blob {missing[0]}")
    centers = CenterState(
        main=blobs["center/main"].copy(),
        fs={layer: blobs[f"center/fs/{layer}"].copy() for layer in cfg.fs_layers},
    )
    return TrainState(student, teacher, centers, velocity, step=step), cfg


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
