"""Query-side student (light encoder + token learner) and its training loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from . import token_learner as tl
from .encoders import (LIGHT_PARAM_NAMES, PROMPT_WORDS, TeacherBundle, TeacherShape,
                       init_light_params, light_encode, one_hot_grids)
from .losses import LossConfig, LossParts, combine, gcd_loss, lar_loss

MODES = ("asymmetric", "symmetric")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 8
    word_dim: int = 16
    joint_dim: int = 16
    token_length: int = 6
    hidden_self: int = 256
    hidden_cross: int = 512
    light_width: int = 32
    scaled_attention: bool = False
    mode: str = "asymmetric"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.token_length < 1:
            raise ValueError("token_length must be >= 1")

    def learner_shape(self) -> tl.TokenLearnerShape:
        return tl.TokenLearnerShape(self.channels, self.token_length, self.word_dim,
                                    self.hidden_self, self.hidden_cross, self.scaled_attention)

    def teacher_shape(self, n_concepts: int, grid: int, object_size: int) -> TeacherShape:
        return TeacherShape(n_concepts=n_concepts, word_dim=self.word_dim, joint_dim=self.joint_dim,
                            map_channels=self.channels, grid=grid, object_size=object_size)

    def as_dict(self) -> dict:
        return asdict(self)


def init_student(cfg: ModelConfig, n_concepts: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Trainable parameters; symmetric mode has no light encoder."""
    params = {}
    if cfg.mode == "asymmetric":
        params.update(init_light_params(n_concepts, cfg.channels, rng, cfg.light_width))
    params.update(tl.init_params(cfg.learner_shape(), rng))
    return params


def param_order(cfg: ModelConfig) -> tuple[str, ...]:
    names = tl.PARAM_NAMES
    return (LIGHT_PARAM_NAMES + names) if cfg.mode == "asymmetric" else names


def augment(planes: np.ndarray, rng: np.random.Generator, noise: float, flip: bool) -> np.ndarray:
    """Per-cell Gaussian jitter plus random horizontal flip, per image."""
    out = planes + rng.normal(0.0, noise, size=planes.shape) if noise > 0 else planes.copy()
    if flip:
        mask = rng.random(planes.shape[0]) < 0.5
        out[mask] = out[mask][:, :, ::-1, :]
    return out


def student_tokens(params, cfg: ModelConfig, teacher: TeacherBundle, grids: np.ndarray,
                   planes: np.ndarray | None = None) -> tl.TokenLearnerOutput:
    """Sentence tokens for a batch of grids (B, H, W).

    Asymmetric mode reads ``planes`` (one-hot, possibly augmented) through
    the light encoder; symmetric mode reads the teacher map of the grid.
    """
    if cfg.mode == "asymmetric":
        if planes is None:
            planes = one_hot_grids(grids, teacher.shape.n_concepts)
        fmap = light_encode(planes, params)
    else:
        fmap = teacher.teacher_map(grids)
    return tl.forward(fmap, params, cfg.scaled_attention)


def prompt_with_tokens(teacher: TeacherBundle, U) -> nx.Tensor:
    """[prompt] u_1..u_L as a (B, |prompt| + L, d_w) token sequence."""
    U = nx.as_tensor(U)
    prompt = teacher.rows(PROMPT_WORDS)
    prompt = np.broadcast_to(prompt, U.shape[:-2] + prompt.shape)
    return nx.concat([prompt, U], axis=-2)


@dataclass
class BatchLoss:
    parts: LossParts
    grads: dict[str, np.ndarray]
    text: np.ndarray


def batch_loss(params, cfg: ModelConfig, loss_cfg: LossConfig, teacher: TeacherBundle,
               grids: np.ndarray, image_feats: np.ndarray, match_targets: np.ndarray,
               negatives: np.ndarray | None, planes: np.ndarray | None = None,
               want_grads: bool = True) -> BatchLoss:
    """Total loss and gradients for one batch.

    ``image_feats`` are the teacher image features v (B, d); ``match_targets``
    are the concept counts the matcher reads from the teacher maps (B, n).
    """
    leaves = {k: nx.Tensor(v, requires_grad=want_grads, name=k) for k, v in params.items()}
    out = student_tokens(leaves, cfg, teacher, grids, planes)
    t = teacher.teacher_text(prompt_with_tokens(teacher, out.tokens))
    gcd = gcd_loss(image_feats, t, loss_cfg.tau)
    if negatives is not None:
        lar = lar_loss(teacher.token_coordinates(out.tokens), match_targets, negatives,
                       float(teacher.match_scale), float(teacher.match_margin))
    else:
        lar = nx.Tensor(0.0)
    parts = combine(gcd, lar, loss_cfg)
    grads = {}
    if want_grads:
        parts.total.backward()
        grads = {k: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
                 for k, leaf in leaves.items()}
    return BatchLoss(parts, grads, t.data)
