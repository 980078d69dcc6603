"""Adaptive token learner: feature map -> L sentence tokens in word space.

Stages, all batched over a leading axis:

1. spatial attention: per-pixel softmax over the L groups,
2. aggregation: attention-weighted mean of pixel features per group,
3. self-attention refinement with a GELU feed-forward residual,
4. cross-attention back onto the flattened map, feed-forward, projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor

PARAM_NAMES = ("W", "Q_r", "K_r", "V_r", "W_r1", "W_r2", "Q_c", "K_c", "V_c", "W_c1", "W_c2", "W_p")
# parameters whose first axis is indexed by token group
GROUP_PARAMS = ("W",)
MASS_FLOOR = 1e-300


@dataclass(frozen=True)
class TokenLearnerShape:
    channels: int
    token_length: int
    word_dim: int
    hidden_self: int = 256
    hidden_cross: int = 512
    scaled_attention: bool = False

    def param_shapes(self) -> dict[str, tuple[int, int]]:
        c, L = self.channels, self.token_length
        return {
            "W": (L, c),
            "Q_r": (c, c), "K_r": (c, c), "V_r": (c, c),
            "W_r1": (c, self.hidden_self), "W_r2": (self.hidden_self, c),
            "Q_c": (c, c), "K_c": (c, c), "V_c": (c, c),
            "W_c1": (c, self.hidden_cross), "W_c2": (self.hidden_cross, c),
            "W_p": (c, self.word_dim),
        }


def init_params(shape: TokenLearnerShape, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per matrix, in ``PARAM_NAMES`` order."""
    if shape.token_length < 1:
        raise ValueError("token_length must be >= 1")
    params = {}
    for name, (rows, cols) in shape.param_shapes().items():
        fan_in = cols if name == "W" else rows
        bound = 1.0 / math.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=(rows, cols))
    return params


def _flatten(fmap: Tensor) -> Tensor:
    if fmap.ndim == 3:
        h, w, c = fmap.shape
        return nx.reshape(fmap, (h * w, c))
    if fmap.ndim == 4:
        b, h, w, c = fmap.shape
        return nx.reshape(fmap, (b, h * w, c))
    raise DimensionError(f"feature map must be (H, W, C) or (B, H, W, C), got {fmap.shape}")


def _logit_scale(dim: int, scaled: bool) -> float:
    return 1.0 / math.sqrt(dim) if scaled else 1.0


def spatial_attention(flat, W) -> Tensor:
    """(…, HW, C) x (L, C) -> (…, HW, L), softmax over the group axis."""
    flat, W = nx.as_tensor(flat), nx.as_tensor(W)
    if flat.shape[-1] != W.shape[-1]:
        raise DimensionError(f"feature channels {flat.shape[-1]} != group weight width {W.shape[-1]}")
    return nx.softmax_over(flat @ W.T, axis=-1)


def aggregate_tokens(flat, attn) -> Tensor:
    """Attention-weighted mean of pixels per group: (…, L, C)."""
    flat, attn = nx.as_tensor(flat), nx.as_tensor(attn)
    if flat.shape[-2] != attn.shape[-2]:
        raise DimensionError(f"{flat.shape[-2]} pixels but attention covers {attn.shape[-2]}")
    per_group = attn.T
    mass = nx.sum(per_group, axis=-1, keepdims=True)
    # guard only an underflowed mass so tokens stay exact weighted means
    guard = np.where(mass.data < MASS_FLOOR, MASS_FLOOR, 0.0)
    return (per_group @ flat) / (mass + guard)


def refine_tokens(Z, p, scaled_attention: bool = False) -> Tensor:
    Z = nx.as_tensor(Z)
    k = Z @ p["K_r"]
    q = Z @ p["Q_r"]
    logits = k @ q.T
    if scaled_attention:
        logits = nx.scale(logits, _logit_scale(Z.shape[-1], True))
    z_out = Z + nx.softmax_over(logits, axis=-1) @ (Z @ p["V_r"])
    return z_out + nx.gelu(z_out @ p["W_r1"]) @ p["W_r2"]


def cross_attend(Z_r, flat, p, scaled_attention: bool = False, return_attention: bool = False):
    """Sentence tokens U (…, L, d_w) from refined tokens and the flattened map.

    The pixel-by-token attention is normalised over tokens and then read
    transposed (tokens gather from pixels) so the residual is (…, L, C).
    """
    Z_r, flat = nx.as_tensor(Z_r), nx.as_tensor(flat)
    if flat.shape[-1] != Z_r.shape[-1]:
        raise DimensionError(f"map channels {flat.shape[-1]} != token width {Z_r.shape[-1]}")
    logits = (flat @ p["K_c"]) @ (Z_r @ p["Q_c"]).T
    if scaled_attention:
        logits = nx.scale(logits, _logit_scale(flat.shape[-1], True))
    attn = nx.softmax_over(logits, axis=-1)
    z_c = Z_r + attn.T @ (flat @ p["V_c"])
    U = (z_c + nx.gelu(z_c @ p["W_c1"]) @ p["W_c2"]) @ p["W_p"]
    return (U, attn) if return_attention else U


@dataclass
class TokenLearnerOutput:
    tokens: Tensor          # U, (…, L, d_w)
    spatial: Tensor         # (…, HW, L), rows sum to one
    visual: Tensor          # Z
    refined: Tensor         # Z_r
    map_hw: tuple[int, int]

    def attention_maps(self) -> np.ndarray:
        """(…, L, H, W) array view of the spatial attention."""
        a = np.swapaxes(self.spatial.data, -1, -2)
        return a.reshape(a.shape[:-1] + self.map_hw)


def forward(fmap, params, scaled_attention: bool = False) -> TokenLearnerOutput:
    fmap = nx.as_tensor(fmap)
    flat = _flatten(fmap)
    attn = spatial_attention(flat, params["W"])
    Z = aggregate_tokens(flat, attn)
    Z_r = refine_tokens(Z, params, scaled_attention)
    U = cross_attend(Z_r, flat, params, scaled_attention)
    return TokenLearnerOutput(U, attn, Z, Z_r, tuple(fmap.shape[-3:-1]))


def permute_groups(params: dict[str, np.ndarray], perm) -> dict[str, np.ndarray]:
    """Reorder the token groups; the rest of the stack is permutation-equivariant."""
    out = dict(params)
    for name in GROUP_PARAMS:
        out[name] = params[name][np.asarray(perm)]
    return out
