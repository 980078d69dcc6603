"""End-to-end runs shared by the command line and the test suite."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import numerics as nx
from . import retrieval as rv
from .config import RunConfig, from_flat
from .datagen import Dataset, SyntheticImage, gen_dataset
from .encoders import TeacherBundle, build_teacher, one_hot_grids
from .losses import LossConfig, choose_negatives
from .model import batch_loss, init_student, param_order, student_tokens
from .trainer import Checkpoint, rng_stream, train

LOSS_VARIANTS = {"full": (1.0, 1.0), "gcd-only": (1.0, 0.0), "lar-only": (0.0, 1.0)}
SWEEP_LENGTHS = (1, 2, 4, 6, 8, 10)
AVERAGED_RECALLS = ("recall@1", "recall@5", "recall@10")


class CheckpointMismatch(ValueError):
    """Stored teacher arrays differ from the teacher the config rebuilds."""


def with_loss_variant(cfg: RunConfig, variant: str) -> RunConfig:
    try:
        gw, lw = LOSS_VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown loss variant {variant!r}; choose from {sorted(LOSS_VARIANTS)}") from None
    return replace(cfg, loss=replace(cfg.loss, gcd_weight=gw, lar_weight=lw))


def make_teacher(cfg: RunConfig) -> TeacherBundle:
    d = cfg.data
    return build_teacher(cfg.model.teacher_shape(d.n_concepts, d.grid, d.object_size), cfg.seed)


def train_model(cfg: RunConfig, dataset: Dataset | None = None,
                on_epoch: Callable[[dict], None] | None = None) -> Checkpoint:
    dataset = dataset if dataset is not None else gen_dataset(cfg.data)
    return train(dataset.train, make_teacher(cfg), cfg.model, cfg.loss, cfg.train,
                 run_config=cfg.flat(), on_epoch=on_epoch)


def restore(ckpt: Checkpoint) -> tuple[RunConfig, TeacherBundle]:
    """Config and teacher of a checkpoint; the teacher is rebuilt and verified."""
    cfg = from_flat(ckpt.config)
    teacher = make_teacher(cfg)
    for name, arr in teacher.arrays().items():
        stored = ckpt.teacher.get(name)
        if stored is None or stored.shape != arr.shape or not np.array_equal(stored, arr):
            raise CheckpointMismatch(f"teacher array {name!r} does not match the checkpoint")
    return cfg, teacher


def average_recall(metrics: dict[str, float]) -> float:
    return float(np.mean([metrics[k] for k in AVERAGED_RECALLS]))


def evaluate(cfg: RunConfig, dataset: Dataset, params, teacher: TeacherBundle,
             index: rv.GalleryIndex | None = None, with_baselines: bool = False) -> dict[str, float]:
    """Flat ``row.metric`` table for the trained model and optionally the baselines."""
    index = index if index is not None else rv.build_index(dataset.gallery, teacher)
    gallery = dataset.gallery_by_id()
    rows = {"model": rv.evaluate_model(dataset.triplets, gallery, index, params, cfg.model, teacher)}
    if with_baselines:
        rows.update(rv.baselines(dataset.triplets, index, teacher, gallery))
    out = {}
    for row, metrics in rows.items():
        for k, v in metrics.items():
            out[f"{row}.{k}"] = v
        out[f"{row}.avg_recall"] = average_recall(metrics)
    return out


@dataclass
class RunResult:
    config: RunConfig
    checkpoint: Checkpoint
    metrics: dict[str, float]


def run(cfg: RunConfig, with_baselines: bool = False) -> RunResult:
    """Generate, train and evaluate one configuration."""
    dataset = gen_dataset(cfg.data)
    ckpt = train_model(cfg, dataset)
    teacher = make_teacher(cfg)
    return RunResult(cfg, ckpt, evaluate(cfg, dataset, ckpt.params, teacher, with_baselines=with_baselines))


def cached_run(cfg: RunConfig, cache: dict | None = None) -> RunResult:
    """:func:`run` with baselines, memoized in ``cache`` keyed by the full config."""
    if cache is None:
        return run(cfg, with_baselines=True)
    if cfg not in cache:
        cache[cfg] = run(cfg, with_baselines=True)
    return cache[cfg]


def summarize(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def token_length_sweep(cfg: RunConfig, lengths=SWEEP_LENGTHS, seeds=(0, 1, 2),
                       progress: Callable[[int, int, dict], None] | None = None,
                       cache: dict | None = None) -> dict[int, dict[str, tuple[float, float]]]:
    """Mean and std over seeds of the model metrics for each token length.

    Passing a ``cache`` dict reuses runs already trained for the same config.
    """
    table = {}
    for length in lengths:
        per_seed = []
        for seed in seeds:
            run_cfg = replace(cfg, model=replace(cfg.model, token_length=int(length))).with_seed(seed)
            result = cached_run(run_cfg, cache) if cache is not None else run(run_cfg)
            metrics = {k[len("model."):]: v for k, v in result.metrics.items() if k.startswith("model.")}
            per_seed.append(metrics)
            if progress is not None:
                progress(length, seed, metrics)
        table[int(length)] = {k: summarize([m[k] for m in per_seed]) for k in per_seed[0]}
    return table


def sweep_metrics(table: dict[int, dict[str, tuple[float, float]]]) -> dict[str, float]:
    out = {}
    for length, metrics in table.items():
        for k, (mean, std) in metrics.items():
            out[f"L{length}.{k}.mean"] = mean
            out[f"L{length}.{k}.std"] = std
    return out


def attention_rows(params, cfg: RunConfig, teacher: TeacherBundle, image: SyntheticImage) -> np.ndarray:
    """(L, H*W) spatial attention of one image; each pixel column sums to one."""
    out = student_tokens(params, cfg.model, teacher, image.grid[None])
    return np.ascontiguousarray(out.spatial.data[0].T)


# -- gradient check -----------------------------------------------------------

GRADCHECK_LOSSES = ("gcd", "lar", "total")
GRADCHECK_EPS = 1e-5
# Jitter that moves the check off the initial point. At initialization the
# token groups are nearly identical and feature maps are small, so the
# attention-logit gradients are ~1e-9, below what central differences resolve.
GRADCHECK_JITTER = 0.5
JITTERED_PARAMS = ("L1_w", "L1_b", "L2_w", "L2_b", "W")


@dataclass
class GradCheckResult:
    seed: int
    loss: str
    report: nx.GradCheckReport


def gradcheck_point(cfg: RunConfig, n_concepts: int, seed: int) -> dict[str, np.ndarray]:
    """Initial parameters with the light encoder and group weights jittered."""
    params = init_student(cfg.model, n_concepts, rng_stream(seed, "init"))
    rng = rng_stream(seed, "gradcheck-point")
    out = {}
    for k in param_order(cfg.model):
        v = params[k]
        if k in JITTERED_PARAMS:
            v = v + rng.normal(0.0, GRADCHECK_JITTER, v.shape)
        out[k] = v
    return out


def gradcheck(cfg: RunConfig, seeds=(0, 1, 2), batch: int = 4, max_coords: int | None = 16,
              eps: float = GRADCHECK_EPS, corrupt: str | None = None) -> list[GradCheckResult]:
    """Finite-difference check of GCD, LAR and their sum through the full student.

    ``corrupt`` names a parameter whose analytic gradient is perturbed; it
    exists so the check can be shown to fail.
    """
    results = []
    for seed in seeds:
        run_cfg = cfg.with_seed(seed)
        dataset = gen_dataset(replace(run_cfg.data, n_train=batch, n_gallery=max(batch, 8),
                                      n_queries=1))
        teacher = make_teacher(run_cfg)
        images = dataset.train[:batch]
        grids = np.stack([img.grid for img in images])
        planes = one_hot_grids(grids, teacher.shape.n_concepts)
        feats = np.stack([teacher.teacher_visual(img.concepts) for img in images])
        targets = teacher.match_targets(teacher.teacher_map(grids))
        negatives = choose_negatives(batch, "random", rng_stream(seed, "negatives"))
        params = gradcheck_point(run_cfg, teacher.shape.n_concepts, seed)
        for loss in GRADCHECK_LOSSES:
            gw, lw = {"gcd": (1.0, 0.0), "lar": (0.0, 1.0), "total": (1.0, 1.0)}[loss]
            loss_cfg = LossConfig(tau=run_cfg.loss.tau, gcd_weight=gw, lar_weight=lw)
            negs = None if lw == 0.0 else negatives

            def fn(p, loss_cfg=loss_cfg, negs=negs):
                out = batch_loss(p, run_cfg.model, loss_cfg, teacher, grids, feats, targets, negs, planes)
                grads = out.grads
                if corrupt is not None:
                    grads = dict(grads)
                    grads[corrupt] = grads[corrupt] * 1.01 + 1e-3
                return out.parts.total.item(), grads

            report = nx.grad_check(fn, params, eps=eps, max_coords=max_coords,
                                   rng=rng_stream(seed, f"gradcheck-{loss}"))
            results.append(GradCheckResult(seed, loss, report))
    return results


def gradcheck_passes(results: list[GradCheckResult], tol: float = 1e-3) -> bool:
    return all(r.report.max_rel_error <= tol for r in results) and not any(
        math.isnan(r.report.max_rel_error) for r in results)
