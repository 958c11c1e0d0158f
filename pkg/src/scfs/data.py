"""Dataset file format and the synthetic shapes corpus.

File layout (little-endian)::

    magic   8 bytes  b"SCFSDATA"
    version u32
    count   u64
    height  u32
    width   u32
    channels u32     always 3
    pixels  count*H*W*3 bytes, uint8, image-major HWC
    labels  count bytes, uint8
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"SCFSDATA"
VERSION = 1
_HEADER = struct.Struct("<8sIQIII")

SHAPES = ("disk", "square", "triangle")


class DatasetFormatError(ValueError):
    """Malformed dataset file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class SyntheticShapesConfig:
    n_classes: int = 3
    image_size: int = 64
    count: int = 1800
    scale_range: tuple[float, float] = (0.22, 0.42)
    clutter_density: float = 0.6
    noise: float = 0.06
    seed: int = 0

    def validate(self, local_size: int = 16) -> None:
        if not 2 <= self.n_classes <= len(SHAPES):
            raise ValueError(f"n_classes must be in [2, {len(SHAPES)}]")
        if self.image_size < 2 * local_size:
            raise ValueError("image_size must be at least twice the local view size")
        if self.count < 0:
            raise ValueError("count must be non-negative")


def write_dataset(path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.dtype != np.uint8 or images.ndim != 4 or images.shape[3] != 3:
        raise ValueError("images must be uint8 with shape (count, H, W, 3)")
    if labels.shape != (images.shape[0],):
        raise ValueError("one label per image required")
    count, h, w, c = images.shape
    header = _HEADER.pack(MAGIC, VERSION, count, h, w, c)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(images).tobytes())
        fh.write(labels.astype(np.uint8).tobytes())


def read_dataset_raw(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a dataset file and return (uint8 images, int64 labels)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise DatasetFormatError("truncated header", len(buf))
    magic, version, count, h, w, c = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 8)
    if c != 3:
        raise DatasetFormatError(f"expected 3 channels, got {c}", 28)
    n_pix = count * h * w * c
    expected = _HEADER.size + n_pix + count
    if len(buf) != expected:
        where = min(len(buf), expected)
        raise DatasetFormatError(
            f"payload size mismatch: header says {count} images of {h}x{w} "
            f"({expected} bytes) but file has {len(buf)} bytes",
            where,
        )
    start = _HEADER.size
    pixels = np.frombuffer(buf, np.uint8, n_pix, start).reshape(count, h, w, c).copy()
    labels = np.frombuffer(buf, np.uint8, count, start + n_pix).astype(np.int64)
    return pixels, labels


def load_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    """Load images as float32 in [0, 1] with shape (count, H, W, 3) and integer labels."""
    pixels, labels = read_dataset_raw(path)
    return pixels.astype(np.float32) / 255.0, labels


# ---------------------------------------------------------------- synthesis


def _shape_mask(kind: str, yy, xx, cy, cx, radius, angle) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    if kind == "disk":
        return u * u + v * v <= radius * radius
    if kind == "square":
        half = radius * 0.886  # same area as the disk
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    # equilateral triangle with the disk's area
    side = radius * np.sqrt(4 * np.pi / np.sqrt(3))
    h = side * np.sqrt(3) / 2
    v0 = v + h / 3
    return (v0 >= 0) & (v0 <= h) & (np.abs(u) <= (h - v0) / np.sqrt(3))


def render_image(label: int, size: int, rng: np.random.Generator, cfg: SyntheticShapesConfig) -> np.ndarray:
    """Render one float image in [0, 1] with a single foreground shape of class ``label``."""
    ss = 2  # supersampling factor for antialiased edges
    n = size * ss
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float32) / ss

    bg = rng.uniform(0.0, 1.0, 3)
    bg2 = rng.uniform(0.0, 1.0, 3)
    freq = rng.uniform(0.05, 0.25, 2)
    phase = rng.uniform(0, 2 * np.pi, 2)
    wave = 0.5 + 0.5 * np.sin(freq[0] * xx + phase[0]) * np.cos(freq[1] * yy + phase[1])
    img = bg[None, None, :] * (1 - wave[..., None]) + bg2[None, None, :] * wave[..., None]

    # clutter: small thin strokes that do not resemble any class
    n_clutter = rng.poisson(cfg.clutter_density * 6)
    for _ in range(n_clutter):
        cy, cx = rng.uniform(0, size, 2)
        length = rng.uniform(3, 8)
        ang = rng.uniform(0, np.pi)
        u = np.cos(ang) * (xx - cx) + np.sin(ang) * (yy - cy)
        v = -np.sin(ang) * (xx - cx) + np.cos(ang) * (yy - cy)
        mask = (np.abs(u) <= length / 2) & (np.abs(v) <= 0.6)
        img[mask] = rng.uniform(0, 1, 3)

    radius = rng.uniform(*cfg.scale_range) * size / 2
    margin = radius * 1.2
    cy, cx = rng.uniform(margin, size - margin, 2)
    angle = rng.uniform(0, 2 * np.pi)
    color = rng.uniform(0, 1, 3)
    # keep the shape visible against the local background
    while np.abs(color - bg).max() < 0.35:
        color = rng.uniform(0, 1, 3)
    mask = _shape_mask(SHAPES[label], yy, xx, cy, cx, radius, angle)
    img[mask] = color

    img = img.reshape(size, ss, size, ss, 3).mean(axis=(1, 3))
    img = img + rng.normal(0, cfg.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def make_synthetic(cfg: SyntheticShapesConfig) -> tuple[np.ndarray, np.ndarray]:
    """Generate (uint8 images, labels) deterministically; labels assigned round-robin."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    labels = np.arange(cfg.count) % cfg.n_classes
    images = np.empty((cfg.count, cfg.image_size, cfg.image_size, 3), dtype=np.uint8)
    for i, lab in enumerate(labels):
        img = render_image(int(lab), cfg.image_size, rng, cfg)
        images[i] = np.round(img * 255).astype(np.uint8)
    return images, labels


def generate_synthetic(cfg: SyntheticShapesConfig, path) -> None:
    images, labels = make_synthetic(cfg)
    try:
        write_dataset(path, images, labels)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {os.fspath(path)}: {exc.strerror}") from exc
