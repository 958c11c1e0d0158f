"""Multi-crop view generation: two global views and N local views per image.

Images are float arrays of shape (H, W, 3) with values in [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AugConfig:
    global_scale: tuple[float, float] = (0.14, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.14)
    global_size: int = 32
    local_size: int = 16
    n_locals: int = 8
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.local_scale
        glo, ghi = self.global_scale
        if not (0 < lo <= hi <= ghi <= 1 and 0 < glo <= ghi):
            raise ValueError("scale ranges must satisfy 0 < local.min <= local.max <= global.max <= 1")
        if self.global_size < 1 or self.local_size < 1 or self.n_locals < 0:
            raise ValueError("view sizes must be positive and n_locals non-negative")


@dataclass
class ViewSet:
    globals: list[np.ndarray]
    locals: list[np.ndarray] = field(default_factory=list)


def view_rng(seed: int, image_index: int, view_index: int, epoch: int = 0) -> np.random.Generator:
    """Independent stream for one view, keyed by (seed, epoch, image, view)."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, image_index, view_index]))


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers; same-size resize is an exact copy."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype, copy=False)


def sample_crop_box(h: int, w: int, scale, rng: np.random.Generator, ratio=(3 / 4, 4 / 3)):
    """Return (top, left, height, width) of a random crop; center crop after 10 failed tries."""
    area = h * w
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = max(1, min(h, w, int(round(math.sqrt(area * scale[1])))))
    return (h - side) // 2, (w - side) // 2, side, side


def random_resized_crop(img: np.ndarray, scale, out_size: int, rng: np.random.Generator,
                        ratio=(3 / 4, 4 / 3)) -> np.ndarray:
    if not (0 < scale[0] <= scale[1] <= 1):
        raise ValueError(f"scale interval {scale} outside (0, 1]")
    if out_size < 1:
        raise ValueError("out_size must be >= 1")
    top, left, ch, cw = sample_crop_box(img.shape[0], img.shape[1], scale, rng, ratio)
    return resize_bilinear(img[top : top + ch, left : left + cw], out_size, out_size)


# ---------------------------------------------------------------- photometric

_GRAY = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def grayscale(img: np.ndarray) -> np.ndarray:
    return img @ _GRAY


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def adjust_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(img * factor, 0, 1)


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    m = grayscale(img).mean()
    return np.clip(m + factor * (img - m), 0, 1)


def adjust_saturation(img: np.ndarray, factor: float) -> np.ndarray:
    g = grayscale(img)[..., None]
    return np.clip(g + factor * (img - g), 0, 1)


_YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ_INV = np.linalg.inv(_YIQ)


def adjust_hue(img: np.ndarray, shift: float) -> np.ndarray:
    """Rotate chroma by ``shift`` turns (shift in [-0.5, 0.5]) in YIQ space."""
    t = 2 * np.pi * shift
    rot = np.array([[1, 0, 0], [0, np.cos(t), -np.sin(t)], [0, np.sin(t), np.cos(t)]])
    m = (_YIQ_INV @ rot @ _YIQ).astype(img.dtype)
    return np.clip(img @ m.T, 0, 1)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k = (k / k.sum()).astype(img.dtype)
    pad = np.pad(img, ((radius, radius), (0, 0), (0, 0)), mode="reflect" if img.shape[0] > radius else "edge")
    rows = sum(k[i] * pad[i : i + img.shape[0]] for i in range(len(k)))
    pad = np.pad(rows, ((0, 0), (radius, radius), (0, 0)), mode="reflect" if img.shape[1] > radius else "edge")
    return sum(k[i] * pad[:, i : i + img.shape[1]] for i in range(len(k)))


def color_jitter(img: np.ndarray, cfg: AugConfig, rng: np.random.Generator) -> np.ndarray:
    b = rng.uniform(max(0.0, 1 - cfg.brightness), 1 + cfg.brightness)
    c = rng.uniform(max(0.0, 1 - cfg.contrast), 1 + cfg.contrast)
    s = rng.uniform(max(0.0, 1 - cfg.saturation), 1 + cfg.saturation)
    hshift = rng.uniform(-cfg.hue, cfg.hue)
    for op in rng.permutation(4):
        if op == 0:
            img = adjust_brightness(img, b)
        elif op == 1:
            img = adjust_contrast(img, c)
        elif op == 2:
            img = adjust_saturation(img, s)
        else:
            img = adjust_hue(img, hshift)
    return img


def photometric(img: np.ndarray, cfg: AugConfig, rng: np.random.Generator) -> np.ndarray:
    """Random flip, color jitter, grayscale and blur; output clamped to [0, 1]."""
    # draws are made unconditionally so the stream layout does not depend on outcomes
    u = rng.uniform(size=4)
    sigma = rng.uniform(*cfg.blur_sigma)
    if u[0] < cfg.flip_prob:
        img = hflip(img)
    if u[1] < cfg.jitter_prob:
        img = color_jitter(img, cfg, rng)
    if u[2] < cfg.grayscale_prob:
        img = np.repeat(grayscale(img)[..., None], 3, axis=2)
    if u[3] < cfg.blur_prob:
        img = gaussian_blur(img, sigma)
    return np.clip(img, 0, 1).astype(np.float32, copy=False)


def make_views(img: np.ndarray, cfg: AugConfig, image_index: int = 0, epoch: int = 0) -> ViewSet:
    """Two global and ``cfg.n_locals`` local views, each from its own RNG substream."""
    cfg.validate()
    h, w = img.shape[:2]
    if h < cfg.local_size or w < cfg.local_size:
        raise ValueError(f"image {h}x{w} smaller than local view size {cfg.local_size}")
    img = np.asarray(img, dtype=np.float32)
    views = []
    for v in range(2 + cfg.n_locals):
        rng = view_rng(cfg.seed, image_index, v, epoch)
        is_global = v < 2
        scale = cfg.global_scale if is_global else cfg.local_scale
        size = cfg.global_size if is_global else cfg.local_size
        crop = random_resized_crop(img, scale, size, rng)
        views.append(photometric(crop, cfg, rng))
    return ViewSet(globals=views[:2], locals=views[2:])


def batch_views(images: np.ndarray, indices, cfg: AugConfig, epoch: int = 0):
    """Stack views of several images into NCHW arrays.

    Returns (globals, locals) with globals shaped (2, B, 3, G, G) and locals
    (N, B, 3, L, L).
    """
    sets = [make_views(images[i], cfg, int(i), epoch) for i in indices]
    g = np.stack([[vs.globals[k] for vs in sets] for k in range(2)]).transpose(0, 1, 4, 2, 3)
    if cfg.n_locals:
        loc = np.stack([[vs.locals[k] for vs in sets] for k in range(cfg.n_locals)]).transpose(0, 1, 4, 2, 3)
    else:
        loc = np.zeros((0, len(sets), 3, cfg.local_size, cfg.local_size), dtype=np.float32)
    return np.ascontiguousarray(g, dtype=np.float32), np.ascontiguousarray(loc, dtype=np.float32)
