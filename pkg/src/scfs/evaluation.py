"""Representation evaluation (k-NN, linear probe) and attention-map export."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import tensor as T
from .augment import resize_bilinear
from .search import EPS
from .tensor import ComputationRecord, ParameterError, Tensor

BANK_MAGIC = b"SCFSBANK"
BANK_VERSION = 1


@dataclass
class FeatureBank:
    features: np.ndarray  # (M, D) float32, rows L2-normalized
    labels: np.ndarray  # (M,) int
    layer: str = "trunk"

    def __len__(self) -> int:
        return len(self.labels)


def available_layers(params: bb.Params) -> list:
    return bb.stage_names(bb.n_stages(params)) + ["trunk"]


def _to_nchw(images: np.ndarray, size: int | None) -> np.ndarray:
    images = np.asarray(images)
    images = images.astype(np.float32) / 255.0 if images.dtype == np.uint8 else images.astype(np.float32)
    if size is not None and images.shape[1:3] != (size, size):
        images = np.stack([resize_bilinear(im, size, size) for im in images])
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2))


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(n, EPS)


def extract_features(params: bb.Params, images: np.ndarray, layer: str = "trunk", image_size: int | None = 32,
                     batch_size: int = 128) -> np.ndarray:
    """Frozen forward pass; pooled stage map (or trunk output), L2-normalized rows."""
    if layer not in available_layers(params):
        raise ParameterError(f"unknown layer {layer!r}; available: {available_layers(params)}")
    x = _to_nchw(images, image_size)
    out = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            feats = bb.encode(params, Tensor(x[i : i + batch_size]))
            v = feats.trunk if layer == "trunk" else T.global_avg_pool(feats[layer])
            out.append(v.data)
    if not out:
        return np.zeros((0, 0), dtype=np.float32)
    return _normalize_rows(np.concatenate(out)).astype(np.float32)


def make_bank(params: bb.Params, images, labels, layer: str = "trunk", image_size: int | None = 32) -> FeatureBank:
    return FeatureBank(extract_features(params, images, layer, image_size), np.asarray(labels, dtype=np.int64), layer)


def knn_predict(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, k: int = 20,
                tau: float = 0.07, n_classes: int | None = None) -> np.ndarray:
    """Weighted k-NN on cosine similarity; each neighbour votes ``exp(sim / tau)``."""
    if len(train_x) == 0 or len(test_x) == 0:
        raise ParameterError("k-NN needs non-empty train and test features")
    if not 1 <= k <= len(train_x):
        raise ParameterError(f"k={k} must lie in [1, {len(train_x)}]")
    a = _normalize_rows(np.asarray(train_x, dtype=np.float64))
    b = _normalize_rows(np.asarray(test_x, dtype=np.float64))
    n_classes = n_classes or int(train_y.max()) + 1
    preds = np.empty(len(b), dtype=np.int64)
    for start in range(0, len(b), 512):
        sims = b[start : start + 512] @ a.T
        # stable sort keeps ties deterministic (lowest train index first)
        idx = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        top = np.take_along_axis(sims, idx, axis=1)
        w = np.exp(top / tau)
        votes = np.zeros((len(idx), n_classes))
        np.add.at(votes, (np.arange(len(idx))[:, None], train_y[idx]), w)
        preds[start : start + 512] = votes.argmax(axis=1)
    return preds


def knn_eval(train: FeatureBank, test: FeatureBank, k: int = 20, tau_knn: float = 0.07) -> float:
    """Top-1 accuracy of weighted k-NN voting."""
    if len(train) == 0 or len(test) == 0:
        raise ParameterError("empty feature bank")
    if train.layer != test.layer:
        raise ParameterError(f"banks come from different layers: {train.layer} vs {test.layer}")
    n_classes = int(max(train.labels.max(), test.labels.max())) + 1
    preds = knn_predict(train.features, train.labels, test.features, k, tau_knn, n_classes)
    return float((preds == test.labels).mean())


def train_linear(x: np.ndarray, y: np.ndarray, n_classes: int, epochs: int = 100, lr: float | None = None,
                 batch_size: int = 256, momentum: float = 0.9, seed: int = 0):
    """Softmax regression by minibatch SGD without weight decay; returns (W, b)."""
    rng = np.random.default_rng(seed)
    lr = 0.1 * batch_size / 256 if lr is None else lr
    d = x.shape[1]
    w = Tensor(np.zeros((n_classes, d), dtype=np.float32), requires_grad=True)
    b = Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True)
    vel = [np.zeros_like(w.data), np.zeros_like(b.data)]
    onehot = np.eye(n_classes, dtype=np.float32)[y]
    n = len(x)
    steps = epochs * max(1, -(-n // batch_size))
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            sel = order[i : i + batch_size]
            w.grad = b.grad = None
            with ComputationRecord() as rec:
                logp = T.log_softmax_temp(T.linear(Tensor(x[sel]), w, b), 1.0)
                loss = T.neg(T.mean(T.tsum(T.mul(Tensor(onehot[sel]), logp), axis=1)))
            T.backward(loss, rec)
            cur = np.float32(lr * 0.5 * (1 + np.cos(np.pi * step / steps)))
            for j, p in enumerate((w, b)):
                vel[j] = np.float32(momentum) * vel[j] + p.grad
                p.data = p.data - cur * vel[j]
            step += 1
    return w.data, b.data


def linear_probe(train: FeatureBank, test: FeatureBank, epochs: int = 100, lr: float | None = None,
                 batch_size: int = 256, seed: int = 0) -> float:
    """Train a linear classifier on frozen train features; return test top-1 accuracy."""
    if train.layer != test.layer:
        raise ParameterError(f"banks come from different layers: {train.layer} vs {test.layer}")
    n_classes = int(max(train.labels.max(), test.labels.max())) + 1
    w, b = train_linear(train.features, train.labels, n_classes, epochs, lr, batch_size, seed=seed)
    preds = (test.features @ w.T + b).argmax(axis=1)
    return float((preds == test.labels).mean())


# ---------------------------------------------------------------- bank file


def bank_bytes(bank: FeatureBank) -> bytes:
    feats = np.ascontiguousarray(bank.features, dtype="<f4")
    m, d = feats.shape if feats.ndim == 2 else (0, 0)
    return (BANK_MAGIC + struct.pack("<IQQ", BANK_VERSION, m, d) + feats.tobytes()
            + np.asarray(bank.labels, dtype="<u4").tobytes())


def save_bank(path, bank: FeatureBank) -> None:
    with open(path, "wb") as fh:
        fh.write(bank_bytes(bank))


def load_bank(path, layer: str = "trunk") -> FeatureBank:
    with open(path, "rb") as fh:
        data = fh.read()
    head = 8 + struct.calcsize("<IQQ")
    if len(data) < head or data[:8] != BANK_MAGIC:
        raise ValueError(f"{os.fspath(path)}: not a feature bank file")
    version, m, d = struct.unpack_from("<IQQ", data, 8)
    if version != BANK_VERSION:
        raise ValueError(f"unsupported bank version {version}")
    if len(data) != head + 4 * m * d + 4 * m:
        raise ValueError(f"{os.fspath(path)}: payload size does not match header ({m} x {d})")
    feats = np.frombuffer(data, "<f4", m * d, head).reshape(m, d).astype(np.float32)
    labels = np.frombuffer(data, "<u4", m, head + 4 * m * d).astype(np.int64)
    return FeatureBank(feats, labels, layer)


# ---------------------------------------------------------------- attention maps


def attention_from_maps(local_map: np.ndarray, global_map: np.ndarray) -> np.ndarray:
    """Cosine attention of a pooled (C, h, w) local map over a (C, H, W) global map."""
    from .search import attention_map

    with T.no_grad():
        q = local_map.reshape(local_map.shape[0], -1).mean(axis=1)
        return attention_map(Tensor(q), Tensor(global_map)).data


def attention_maps(params: bb.Params, global_img: np.ndarray, local_imgs, layer: str) -> dict:
    """Raw attention maps of each local image and of their mean query against the global image.

    Returns ``{"locals": [A_1, ...], "mean": A_mean}`` at the layer's spatial size.
    """
    if layer not in bb.stage_names(bb.n_stages(params)):
        raise ParameterError(f"unknown stage {layer!r}")
    with T.no_grad():
        g = bb.encode(params, Tensor(_to_nchw(global_img[None], None)))[layer].data[0]
        locs = [bb.encode(params, Tensor(_to_nchw(im[None], None)))[layer].data[0] for im in local_imgs]
    return maps_from_features(g, locs)


def maps_from_features(global_map: np.ndarray, local_maps) -> dict:
    from .search import attention_map

    queries = [m.reshape(m.shape[0], -1).mean(axis=1) for m in local_maps]
    with T.no_grad():
        out = [attention_map(Tensor(q), Tensor(global_map)).data for q in queries]
        mean_q = np.mean(queries, axis=0) if queries else np.zeros(global_map.shape[0], np.float32)
        mean_map = attention_map(Tensor(mean_q), Tensor(global_map)).data
    return {"locals": out, "mean": mean_map}


def normalize_heatmap(a: np.ndarray) -> np.ndarray:
    """Per-map min-max scaling to [0, 1]; a constant map becomes all ones."""
    lo, hi = float(a.min()), float(a.max())
    if hi - lo < 1e-12:
        return np.ones_like(a, dtype=np.float64)
    return (a - lo) / (hi - lo)


def upsample(a: np.ndarray, h: int, w: int) -> np.ndarray:
    return resize_bilinear(a[..., None].astype(np.float64), h, w)[..., 0]


def write_pgm(path, gray: np.ndarray) -> None:
    """8-bit binary PGM from values in [0, 1]."""
    g = np.clip(np.round(gray * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii"))
        fh.write(g.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """8-bit binary PPM from (H, W, 3) values in [0, 1]."""
    c = np.clip(np.round(rgb * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{c.shape[1]} {c.shape[0]}\n255\n".encode("ascii"))
        fh.write(c.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM written by this module (uint8 array)."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    kind, (w, h) = parts[0], map(int, parts[1].split())
    body = np.frombuffer(parts[3], np.uint8)
    return body.reshape(h, w, 3) if kind == b"P6" else body.reshape(h, w)


def overlay(img: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    red = np.stack([heat, np.zeros_like(heat), 1 - heat], axis=-1)
    return (1 - alpha) * img + alpha * red


def export_attention(maps: dict, global_img: np.ndarray, out_dir) -> list:
    """Write ``attn_XX.pgm``/``attn_XX_overlay.ppm`` per local and ``attn_mean`` for the mean query.

    Returns the list of grayscale heatmap paths (N + 1 of them).
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {os.fspath(out_dir)}: {exc.strerror}") from exc
    h, w = global_img.shape[:2]
    named = [(f"attn_{i:02d}", a) for i, a in enumerate(maps["locals"])] + [("attn_mean", maps["mean"])]
    paths = []
    for name, a in named:
        heat = upsample(normalize_heatmap(a), h, w)
        gray_path = os.path.join(out_dir, f"{name}.pgm")
        try:
            write_pgm(gray_path, heat)
            write_ppm(os.path.join(out_dir, f"{name}_overlay.ppm"), overlay(global_img, heat))
        except OSError as exc:
            raise OSError(f"cannot write heatmap to {os.fspath(out_dir)}: {exc.strerror}") from exc
        paths.append(gray_path)
    return paths


def attention_export(params: bb.Params, global_img: np.ndarray, local_imgs, layer: str, out_dir) -> list:
    return export_attention(attention_maps(params, global_img, local_imgs, layer), global_img, out_dir)
