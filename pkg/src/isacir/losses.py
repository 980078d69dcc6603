"""Global contrastive distillation (GCD) and local alignment regularization (LAR)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

NEGATIVE_POLICIES = ("random", "hardest")


class LossConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    lar_negatives: str = "random"
    gcd_weight: float = 1.0
    lar_weight: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise LossConfigError(f"temperature must be positive, got {self.tau}")
        if self.lar_negatives not in NEGATIVE_POLICIES:
            raise LossConfigError(f"unknown LAR negative policy {self.lar_negatives!r}")


def gcd_loss(v, t, tau: float) -> Tensor:
    """Symmetric in-batch cross-entropy between image and text features.

    ``v`` and ``t`` are (B, d) unit rows; pair i is the positive for row i in
    both the image-to-text and the text-to-image softmax.
    """
    if not tau > 0:
        raise LossConfigError(f"temperature must be positive, got {tau}")
    v, t = nx.as_tensor(v), nx.as_tensor(t)
    if v.shape != t.shape or v.ndim != 2:
        raise nx.DimensionError(f"gcd_loss expects matching (B, d) inputs, got {v.shape} and {t.shape}")
    target = np.eye(v.shape[0])
    i2t = nx.softmax_over(nx.scale(v @ t.T, 1.0 / tau), axis=-1)
    t2i = nx.softmax_over(nx.scale(t @ v.T, 1.0 / tau), axis=-1)
    return nx.scale(nx.cross_entropy(i2t, target) + nx.cross_entropy(t2i, target), 0.5)


def choose_negatives(batch_size: int, policy: str, rng: np.random.Generator | None = None,
                     v: np.ndarray | None = None, t: np.ndarray | None = None) -> np.ndarray:
    """Index j != i of the negative map donor for every item i."""
    if batch_size < 2:
        raise LossConfigError("in-batch LAR negatives need a batch of at least two")
    if policy == "random":
        if rng is None:
            raise LossConfigError("random negative policy needs a generator")
        offs = rng.integers(1, batch_size, size=batch_size)
        return (np.arange(batch_size) + offs) % batch_size
    if policy == "hardest":
        if v is None or t is None:
            raise LossConfigError("hardest negative policy needs image and text features")
        sim = np.asarray(t) @ np.asarray(v).T     # [i, j] = t_i . v_j
        np.fill_diagonal(sim, -np.inf)
        return sim.argmax(axis=1)
    raise LossConfigError(f"unknown LAR negative policy {policy!r}")


def lar_from_probabilities(p_pos, p_neg) -> Tensor:
    """Mean binary cross-entropy over B positive (label 1) and B negative (label 0) pairs."""
    p_pos, p_neg = nx.as_tensor(p_pos), nx.as_tensor(p_neg)
    probs = nx.concat([nx.reshape(p_pos, (-1, 1)), nx.reshape(p_neg, (-1, 1))], axis=1)
    labels = np.zeros(probs.shape)
    labels[:, 0] = 1.0
    return nx.binary_cross_entropy(probs, labels)


def match_logit(q, targets, scale: float, margin: float) -> Tensor:
    """scale * (cos(q, g) - margin) per row.

    ``q`` are token concept coordinates and ``targets`` the concept counts
    read from the teacher map. A zero ``scale`` gives a constant logit 0.
    """
    qn = nx.l2_normalize(q, axis=-1)
    g = np.asarray(targets, dtype=np.float64)
    g = g / np.linalg.norm(g, axis=-1, keepdims=True)
    return nx.scale(nx.sum(qn * g, axis=-1) - margin, scale)


def match_probability(q, targets, scale: float, margin: float) -> Tensor:
    return nx.sigmoid(match_logit(q, targets, scale, margin))


def lar_from_logits(z_pos, z_neg) -> Tensor:
    """Stable form of :func:`lar_from_probabilities` on matcher logits."""
    z_pos, z_neg = nx.as_tensor(z_pos), nx.as_tensor(z_neg)
    z = nx.concat([nx.reshape(z_pos, (-1, 1)), nx.reshape(z_neg, (-1, 1))], axis=1)
    labels = np.zeros(z.shape)
    labels[:, 0] = 1.0
    return nx.binary_cross_entropy_with_logits(z, labels)


def lar_loss(q, targets: np.ndarray, negatives: np.ndarray, scale: float, margin: float) -> Tensor:
    """q (B, n) token coordinates; ``targets[i]`` are the map counts of item i.

    Item i is scored against its own map (label 1) and against the map of
    ``negatives[i]`` (label 0).
    """
    negatives = np.asarray(negatives)
    if len(negatives) < 2:
        raise LossConfigError("in-batch LAR negatives need a batch of at least two")
    if np.any(negatives == np.arange(len(negatives))):
        raise LossConfigError("a negative donor equals its own item")
    targets = np.asarray(targets)
    return lar_from_logits(match_logit(q, targets, scale, margin),
                           match_logit(q, targets[negatives], scale, margin))


@dataclass
class LossParts:
    total: Tensor
    gcd: Tensor
    lar: Tensor


def combine(gcd: Tensor, lar: Tensor, config: LossConfig) -> LossParts:
    total = nx.scale(gcd, config.gcd_weight) + nx.scale(lar, config.lar_weight)
    return LossParts(total, gcd, lar)
