"""Training configuration and its ``key = value`` text form."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .augment import AugConfig


@dataclass
class TrainConfig:
    # optimisation
    batch_size: int = 64
    epochs: int = 15
    base_lr: float = 0.0  # 0 selects the linear scaling rule 0.1 * batch / 256
    warmup_epochs: int = 10
    final_lr: float = 0.0
    weight_decay: float = 1e-4
    sgd_momentum: float = 0.9
    grad_clip: float = 0.0
    freeze_last_layer_epochs: int = 1  # output directions of every head stay fixed this long
    # temperatures
    tau: float = 0.1
    tau_t_start: float = 0.04
    tau_t_end: float = 0.07
    tau_t_warmup_epochs: int = 50
    # teacher / centers
    ema_momentum: float = 0.996
    ema_cosine: bool = True
    center_momentum: float = 0.9
    # contrast modes
    n_locals: int = 8
    layers: tuple = ("res2", "res3", "res4")
    use_fs: bool = True
    multicrop: bool = True
    normalize_locals: bool = False
    attention: str = "cosine"  # or "softmax" over positions
    # model
    widths: tuple = (32, 64, 128)
    K: int = 256
    K_fs: int = 256
    hidden: int = 512
    bottleneck: int = 64
    fs_ratio: float = 0.25
    fs_fc_hidden: int = 256
    # views
    global_size: int = 32
    local_size: int = 16
    global_scale: tuple = (0.14, 1.0)
    local_scale: tuple = (0.05, 0.14)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    # bookkeeping
    seed: int = 0
    dataset: str = ""
    workers: int = 1

    @property
    def lr(self) -> float:
        return self.base_lr if self.base_lr > 0 else 0.1 * self.batch_size / 256

    @property
    def fs_layers(self) -> tuple:
        return tuple(self.layers) if self.use_fs else ()

    @property
    def effective_locals(self) -> int:
        return self.n_locals if self.multicrop else 0

    def aug_config(self) -> AugConfig:
        return AugConfig(
            global_scale=tuple(self.global_scale), local_scale=tuple(self.local_scale),
            global_size=self.global_size, local_size=self.local_size, n_locals=self.effective_locals,
            flip_prob=self.flip_prob, jitter_prob=self.jitter_prob, grayscale_prob=self.grayscale_prob,
            blur_prob=self.blur_prob, seed=self.seed,
        )

    def validate(self) -> None:
        positive = ("batch_size", "tau", "tau_t_start", "tau_t_end", "K", "K_fs", "hidden", "bottleneck",
                    "global_size", "local_size")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.n_locals < 0 or self.warmup_epochs < 0:
            raise ValueError("epochs, n_locals and warmup_epochs must be non-negative")
        for name in ("ema_momentum", "center_momentum", "sgd_momentum"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        n_stages = len(self.widths)
        known = {f"res{s + 2}" for s in range(n_stages)}
        bad = [layer for layer in self.layers if layer not in known]
        if bad:
            raise ValueError(f"unknown layers {bad}; available: {sorted(known)}")
        if self.attention not in ("cosine", "softmax"):
            raise ValueError(f"attention must be 'cosine' or 'softmax', got {self.attention!r}")
        if self.use_fs and not self.layers:
            raise ValueError("layer set is empty while feature search is enabled")
        self.aug_config().validate()

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(x) for x in items)
        if default and isinstance(default[0], float):
            return tuple(float(x) for x in items)
        return tuple(items)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def config_field_names() -> list:
    return [f.name for f in fields(TrainConfig)]


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    cfg = base or TrainConfig()
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in config_field_names():
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        changes[key] = _parse_value(raw, getattr(cfg, key))
    return cfg.replace(**changes)


def override(cfg: TrainConfig, **values) -> TrainConfig:
    """Apply string or typed overrides (e.g. from command-line flags)."""
    changes = {}
    for key, v in values.items():
        if v is None:
            continue
        default = getattr(cfg, key)
        changes[key] = _parse_value(v, default) if isinstance(v, str) and not isinstance(default, str) else v
    return cfg.replace(**changes)


def load_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))
