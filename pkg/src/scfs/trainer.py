"""Pre-training loop: schedules, SGD, teacher/center updates and loss trace."""
from __future__ import annotations

import logging
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import tensor as T
from .augment import batch_views
from .config import TrainConfig
from .ema import CenterState, center_update, ema_update, make_teacher, momentum_at
from .losses import LossBreakdown, breakdown, data_loss, fs_loss, total_loss
from .search import FsPairs, feature_search, fs_project, init_fs_head
from .tensor import ComputationRecord, NumericError, Tensor

logger = logging.getLogger(__name__)


class TrainingDivergedError(NumericError):
    def __init__(self, message: str, dump_path: str | None):
        super().__init__(f"{message}; step tensors dumped to {dump_path}" if dump_path else message)
        self.dump_path = dump_path


# ---------------------------------------------------------------- schedules


def steps_per_epoch(n_images: int, cfg: TrainConfig) -> int:
    return max(1, n_images // cfg.batch_size)


def lr_at(step: int, cfg: TrainConfig, spe: int = 1) -> float:
    """Linear warmup from 0, then cosine decay to ``final_lr``."""
    base = cfg.lr
    warm = cfg.warmup_epochs * spe
    total = max(cfg.epochs * spe, warm)
    if step < warm:
        return base * step / warm
    if total == warm:
        return base
    frac = min((step - warm) / (total - warm), 1.0)
    return cfg.final_lr + (base - cfg.final_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


def teacher_temp_at(epoch: float, cfg: TrainConfig) -> float:
    """Linear warmup of the teacher temperature, constant afterwards."""
    if cfg.tau_t_warmup_epochs <= 0 or epoch >= cfg.tau_t_warmup_epochs:
        return cfg.tau_t_end
    return cfg.tau_t_start + (cfg.tau_t_end - cfg.tau_t_start) * epoch / cfg.tau_t_warmup_epochs


def teacher_momentum_at(step: int, cfg: TrainConfig, spe: int = 1) -> float:
    if not cfg.ema_cosine:
        return cfg.ema_momentum
    return momentum_at(step, cfg.epochs * spe, cfg.ema_momentum)


# ---------------------------------------------------------------- state


def init_model(cfg: TrainConfig) -> bb.Params:
    """Student parameters: trunk, main head and one feature-search head per layer."""
    rng = np.random.default_rng(cfg.seed)
    arrays = bb.init_backbone(rng, cfg.widths)
    arrays.update(bb.init_main_head(rng, cfg.widths[-1], cfg.K, cfg.hidden, cfg.bottleneck))
    channels = dict(zip(bb.stage_names(len(cfg.widths)), cfg.widths))
    for layer in cfg.fs_layers:
        arrays.update(init_fs_head(rng, layer, channels[layer], cfg.K_fs, cfg.fs_ratio, cfg.fs_fc_hidden))
    return bb.to_tensors(arrays)


@dataclass
class TrainState:
    student: dict
    teacher: dict
    centers: CenterState
    velocity: dict
    step: int = 0

    @classmethod
    def initial(cls, cfg: TrainConfig) -> "TrainState":
        student = init_model(cfg)
        return cls(
            student=student,
            teacher=make_teacher(student),
            centers=CenterState.zeros(cfg.K, cfg.K_fs, cfg.fs_layers),
            velocity={k: np.zeros_like(v.data) for k, v in student.items()},
        )


@dataclass
class StepRecord:
    step: int
    lr: float
    tau_t: float
    losses: LossBreakdown
    teacher_std_min: float
    teacher_grad_max: float = 0.0

    def trace_line(self) -> str:
        vals = [self.step, repr(self.lr), repr(self.tau_t)] + [repr(float(v)) for v in self.losses.as_row()]
        return "\t".join(str(v) for v in vals)


def trace_header(cfg: TrainConfig) -> str:
    cols = ["step", "lr", "tau_t", "L_g", "L_l", "L_d"] + [f"L_fs_{x}" for x in cfg.fs_layers] + ["L_fs", "L"]
    return "\t".join(cols)


# ---------------------------------------------------------------- one step


def _forward_losses(student, teacher, centers, g_views, l_views, cfg: TrainConfig, tau_t: float, frozen=None):
    """Student/teacher forward passes and all loss terms (records into the active record).

    ``frozen`` = (teacher logits, {layer: teacher feature-search logits})
    replaces every teacher-side output with fixed values.
    """
    n_loc = l_views.shape[0]
    b = g_views.shape[1]
    g_flat = Tensor(g_views.reshape((-1,) + g_views.shape[2:]))

    t_feats = None
    if frozen is None:
        with T.no_grad():
            t_feats = bb.encode(teacher, g_flat)
            t_logits = bb.project_main(teacher, t_feats.trunk).data.reshape(2, b, -1)
    else:
        t_logits = frozen[0]

    s_g_feats = bb.encode(student, g_flat)
    s_g = T.reshape(bb.project_main(student, s_g_feats.trunk), (2, b, -1))
    s_locals = []
    s_l_feats = None
    if n_loc:
        s_l_feats = bb.encode(student, Tensor(l_views.reshape((-1,) + l_views.shape[2:])))
        s_l = T.reshape(bb.project_main(student, s_l_feats.trunk), (n_loc, b, -1))
        s_locals = [s_l[i] for i in range(n_loc)]

    l_g, l_l, l_d = data_loss((s_g[0], s_g[1]), (t_logits[0], t_logits[1]), s_locals, centers.main,
                              cfg.tau, tau_t, cfg.normalize_locals)

    if cfg.multicrop:
        query_feats, n_q, cross = s_l_feats, n_loc, False
    else:
        query_feats, n_q, cross = s_g_feats, 2, True
    pairs = {}
    if n_q and cfg.fs_layers:
        if frozen is None:
            pairs = feature_search(query_feats, t_feats, student, teacher, cfg.fs_layers, n_q, cross, cfg.attention)
        else:
            mask = ~np.eye(2, dtype=bool) if cross else None
            for layer in cfg.fs_layers:
                s_fs = T.reshape(fs_project(student, layer, query_feats[layer]), (n_q, b, -1))
                pairs[layer] = FsPairs(layer, s_fs, frozen[1][layer], mask)
    per_layer, l_fs = fs_loss(pairs, centers.fs, cfg.tau, tau_t, cfg.normalize_locals)
    total = total_loss(l_d, l_fs)
    return (l_g, l_l, l_d, per_layer, l_fs, total), t_logits, pairs


def batch_for_step(step: int, n_images: int, cfg: TrainConfig) -> tuple[int, np.ndarray]:
    """(epoch, image indices) of a global step; order is a per-epoch seeded permutation."""
    spe = steps_per_epoch(n_images, cfg)
    epoch, pos = divmod(step, spe)
    perm = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 0x5EED])).permutation(n_images)
    return epoch, perm[pos * cfg.batch_size : (pos + 1) * cfg.batch_size]


def make_batch(images: np.ndarray, indices, epoch: int, cfg: TrainConfig, pool=None):
    aug = cfg.aug_config()
    if pool is None or len(indices) < 2:
        return batch_views(images, indices, aug, epoch)
    chunks = np.array_split(np.asarray(indices), cfg.workers)
    parts = list(pool.map(lambda idx: batch_views(images, idx, aug, epoch), [c for c in chunks if len(c)]))
    return np.concatenate([p[0] for p in parts], axis=1), np.concatenate([p[1] for p in parts], axis=1)


def _dump(step: int, tensors: dict, dump_dir: str | None) -> str | None:
    try:
        d = dump_dir or tempfile.gettempdir()
        os.makedirs(d, exist_ok=True)
        path = os.path.join(d, f"scfs_diverged_step{step}.npz")
        np.savez(path, **{k: np.asarray(v) for k, v in tensors.items()})
        return path
    except OSError:
        return None


def train_step(images: np.ndarray, state: TrainState, cfg: TrainConfig, n_images: int | None = None,
               pool=None, dump_dir: str | None = None) -> StepRecord:
    """One optimisation step at ``state.step``; mutates ``state`` in place."""
    n_images = len(images) if n_images is None else n_images
    spe = steps_per_epoch(n_images, cfg)
    epoch, idx = batch_for_step(state.step, n_images, cfg)
    g_views, l_views = make_batch(images, idx, epoch, cfg, pool)
    lr = lr_at(state.step, cfg, spe)
    tau_t = teacher_temp_at(epoch, cfg)

    for p in state.student.values():
        p.grad = None
    with ComputationRecord() as rec:
        try:
            terms, t_logits, pairs = _forward_losses(state.student, state.teacher, state.centers,
                                                     g_views, l_views, cfg, tau_t)
        except NumericError as exc:
            path = _dump(state.step, {"globals": g_views, "locals": l_views}, dump_dir)
            raise TrainingDivergedError(f"non-finite value at step {state.step}: {exc}", path) from exc
    l_g, l_l, l_d, per_layer, l_fs, total = terms
    if not np.isfinite(total.item()):
        path = _dump(state.step, {"globals": g_views, "locals": l_views, "teacher_logits": t_logits}, dump_dir)
        raise TrainingDivergedError(f"non-finite loss at step {state.step}", path)
    T.backward(total, rec)

    teacher_grad = max((float(np.abs(p.grad).max()) for p in state.teacher.values() if p.grad is not None),
                       default=0.0)
    frozen = _last_layers(state.student) if epoch < cfg.freeze_last_layer_epochs else ()
    _sgd(state, cfg, lr, frozen)
    ema_update(state.student, state.teacher, teacher_momentum_at(state.step, cfg, spe))
    state.centers.main = center_update(state.centers.main, t_logits, cfg.center_momentum)
    for layer, pr in pairs.items():
        state.centers.fs[layer] = center_update(state.centers.fs[layer], pr.teacher_used(), cfg.center_momentum)

    rows = t_logits.reshape(-1, t_logits.shape[-1])
    rec_ = StepRecord(
        step=state.step, lr=lr, tau_t=tau_t,
        losses=breakdown(l_g, l_l, l_d, per_layer, l_fs, total),
        teacher_std_min=float(rows.std(axis=0).min()),
        teacher_grad_max=teacher_grad,
    )
    state.step += 1
    return rec_


def _last_layers(params) -> tuple:
    """Weight-normalized output directions of the main and feature-search heads."""
    return tuple(k for k in params if k == "head.last.v" or (k.startswith("fs.") and k.endswith(".fc2.v")))


def _sgd(state: TrainState, cfg: TrainConfig, lr: float, frozen=()) -> None:
    grads = {k: p.grad for k, p in state.student.items() if p.grad is not None}
    if cfg.grad_clip > 0 and grads:
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        if norm > cfg.grad_clip:
            grads = {k: g * np.float32(cfg.grad_clip / norm) for k, g in grads.items()}
    lr32 = np.float32(lr)
    mom = np.float32(cfg.sgd_momentum)
    wd = np.float32(cfg.weight_decay)
    for k, p in state.student.items():
        if k in frozen:
            continue
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        g = g + wd * p.data
        v = mom * state.velocity[k] + g
        state.velocity[k] = v
        p.data = p.data - lr32 * v


# ---------------------------------------------------------------- loop


@dataclass
class FitResult:
    state: TrainState
    records: list = field(default_factory=list)


def total_steps(n_images: int, cfg: TrainConfig) -> int:
    return cfg.epochs * steps_per_epoch(n_images, cfg)


def fit(images: np.ndarray, cfg: TrainConfig, state: TrainState | None = None, *, max_steps: int | None = None,
        trace_path=None, checkpoint_path=None, checkpoint_every: int = 0, dump_dir: str | None = None,
        callback=None) -> FitResult:
    """Train from ``state`` (fresh if None) to the end of the schedule or ``max_steps`` total steps.

    ``trace_path`` receives one tab-separated line per step (appended when
    resuming). ``checkpoint_every`` counts steps; the final state is always
    written when ``checkpoint_path`` is given.
    """
    from .checkpoint import save_checkpoint

    cfg.validate()
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"images must be (count, H, W, 3), got {images.shape}")
    n = len(images)
    if n < cfg.batch_size and cfg.epochs > 0:
        raise ValueError(f"dataset has {n} images, fewer than one batch of {cfg.batch_size}")
    state = state or TrainState.initial(cfg)
    end = total_steps(n, cfg)
    if max_steps is not None:
        end = min(end, max_steps)
    images = np.asarray(images, dtype=np.float32)

    trace = None
    if trace_path is not None:
        fresh = state.step == 0 or not os.path.exists(trace_path)
        trace = open(trace_path, "w" if fresh else "a", encoding="utf-8")
        if fresh:
            trace.write(trace_header(cfg) + "\n")
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    result = FitResult(state)
    try:
        while state.step < end:
            rec = train_step(images, state, cfg, n, pool, dump_dir)
            result.records.append(rec)
            if trace:
                trace.write(rec.trace_line() + "\n")
                trace.flush()
            if rec.step % 10 == 0:
                logger.info("step %d  lr %.5f  L %.4f  L_d %.4f  L_fs %.4f", rec.step, rec.lr,
                            rec.losses.L, rec.losses.L_d, rec.losses.L_fs)
            if callback is not None:
                callback(rec, state)
            if checkpoint_path and checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(checkpoint_path, state, cfg, steps_per_epoch(n, cfg))
    finally:
        if trace:
            trace.close()
        if pool:
            pool.shutdown()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, state, cfg, steps_per_epoch(n, cfg))
    return result


def read_trace(path) -> tuple[list, list]:
    """Parse a trace file into (header columns, rows of floats)."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = lines[0].split("\t")
    rows = [[float(x) for x in line.split("\t")] for line in lines[1:] if line]
    return header, rows
