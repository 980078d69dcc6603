"""Optimise the student against the frozen teacher."""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .datagen import SyntheticImage
from .encoders import TeacherBundle, one_hot_grids
from .losses import LossConfig, choose_negatives
from .model import ModelConfig, augment, batch_loss, init_student, param_order

log = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: "Checkpoint | None" = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    epochs: int = 20
    warmup_epochs: int = 5
    batch_size: int = 32
    weight_decay: float = 0.01
    seed: int = 0
    clip_norm: float | None = None
    aug_noise: float = 0.05
    aug_flip: bool = True

    def __post_init__(self):
        if self.epochs > 0 and not self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")

    def as_dict(self) -> dict:
        return asdict(self)


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose (data, init, augmentation, negatives)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def lr_at(step: int, peak: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warm-up to ``peak`` then cosine annealing to zero at ``total_steps``."""
    if total_steps <= 0:
        return 0.0
    step = min(max(step, 0), total_steps)
    if step < warmup_steps:
        return peak * step / warmup_steps
    if total_steps == warmup_steps:
        return peak
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
                   lr: float, weight_decay: float) -> None:
    """AdamW, in place: decoupled decay, then the bias-corrected moment step."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise TrainingDiverged(f"non-finite gradient for {name} ({bad} entries) at step {state.step + 1}")
    state.step += 1
    b1, b2 = BETAS
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(float(np.sum([np.sum(g * g) for g in grads.values()])))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= factor
    return total


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict
    history: list[dict]
    seed: int
    teacher: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


@dataclass
class TrainData:
    """Per-image arrays precomputed once; the teacher side never changes."""

    grids: np.ndarray
    planes: np.ndarray
    image_feats: np.ndarray
    match_targets: np.ndarray

    @classmethod
    def build(cls, images: list[SyntheticImage], teacher: TeacherBundle) -> "TrainData":
        grids = np.stack([img.grid for img in images])
        feats = np.stack([teacher.teacher_visual(img.concepts) for img in images])
        maps = teacher.teacher_map(grids)
        return cls(grids, one_hot_grids(grids, teacher.shape.n_concepts), feats,
                   teacher.match_targets(maps))


def train(images: list[SyntheticImage], teacher: TeacherBundle, model_cfg: ModelConfig,
          loss_cfg: LossConfig, train_cfg: TrainConfig, run_config: dict | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> Checkpoint:
    if not images:
        raise ValueError("training set is empty")
    seed = train_cfg.seed
    params = init_student(model_cfg, teacher.shape.n_concepts, rng_stream(seed, "init"))
    params = {k: params[k] for k in param_order(model_cfg)}
    config = dict(run_config or {})
    history: list[dict] = []
    teacher_arrays = {k: np.array(v) for k, v in teacher.arrays().items()}

    def snapshot() -> Checkpoint:
        return Checkpoint({k: v.copy() for k, v in params.items()}, config,
                          [dict(h) for h in history], seed, teacher_arrays)

    if train_cfg.epochs == 0:
        return snapshot()

    data = TrainData.build(images, teacher)
    n = len(images)
    batch = min(train_cfg.batch_size, n)
    if batch < 2:
        raise ValueError("need at least two training images")
    per_epoch = n // batch
    total = per_epoch * train_cfg.epochs
    warmup = per_epoch * train_cfg.warmup_epochs
    rng_data = rng_stream(seed, "data")
    rng_aug = rng_stream(seed, "augmentation")
    rng_neg = rng_stream(seed, "negatives")
    state = AdamState()
    use_lar = loss_cfg.lar_weight != 0.0
    step = 0
    last_good = snapshot()

    for epoch in range(1, train_cfg.epochs + 1):
        order = rng_data.permutation(n)
        sums = np.zeros(3)
        for b in range(per_epoch):
            idx = order[b * batch:(b + 1) * batch]
            step += 1
            lr = lr_at(step, train_cfg.lr, warmup, total)
            planes = None
            if model_cfg.mode == "asymmetric":
                planes = augment(data.planes[idx], rng_aug, train_cfg.aug_noise, train_cfg.aug_flip)
            negatives = None
            if use_lar:
                if loss_cfg.lar_negatives == "random":
                    negatives = choose_negatives(len(idx), "random", rng_neg)
                else:
                    probe = batch_loss(params, model_cfg, loss_cfg, teacher, data.grids[idx],
                                       data.image_feats[idx], data.match_targets[idx], None,
                                       planes, want_grads=False)
                    negatives = choose_negatives(len(idx), "hardest", v=data.image_feats[idx], t=probe.text)
            out = batch_loss(params, model_cfg, loss_cfg, teacher, data.grids[idx],
                             data.image_feats[idx], data.match_targets[idx], negatives, planes)
            values = np.array([out.parts.gcd.item(), out.parts.lar.item(), out.parts.total.item()])
            if not np.all(np.isfinite(values)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}", last_good)
            if train_cfg.clip_norm is not None:
                clip_global_norm(out.grads, train_cfg.clip_norm)
            try:
                optimizer_step(params, out.grads, state, lr, train_cfg.weight_decay)
            except TrainingDiverged as exc:
                raise TrainingDiverged(str(exc), last_good) from None
            sums += values
        row = {"epoch": epoch, "gcd": sums[0] / per_epoch, "lar": sums[1] / per_epoch,
               "total": sums[2] / per_epoch, "lr": lr_at(step, train_cfg.lr, warmup, total)}
        history.append(row)
        log.info("epoch %d gcd=%.4f lar=%.4f total=%.4f", epoch, row["gcd"], row["lar"], row["total"])
        if on_epoch is not None:
            on_epoch(row)
        last_good = snapshot()
    return last_good
