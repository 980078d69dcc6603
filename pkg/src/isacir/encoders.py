"""Query-side light encoder and the frozen teacher bundle.

The teacher is constructed rather than learned. Word embeddings live in a
``d_w``-dim space split into a concept subspace and a function-word
subspace. The text projection ``T`` is an isometry on the concept subspace
and zero on function words, and a bias ``b`` orthogonal to the range of
``T`` anchors every text/image feature. The image feature of an image is
the text feature of its caption (its concept words), so a student whose
tokens reproduce the caption in concept space reaches the teacher exactly.

Text encoding, per sequence ``x_1..x_n``::

    xh_k = x_k / |x_k|
    g_1  = 1,   g_k = 1 - 2 * sigmoid(kappa * (xh_{k-1} . neg - theta))
    h    = sum_k g_k xh_k @ T + b
    t    = normalize(h + cos(h @ A + phi) @ B)

The gate flips the sign of the word after a negating word ("remove",
"replace"), so "replace X with Y" contributes ``Y - X``. The residual
random-cosine head makes the joint space non-additive: composing words
before the head differs from adding finished features after it.

The matcher scores a token set against an image. Tokens are read back to
concept coordinates ``q = sum_l normalize(u_l) @ R`` and the mean-pooled
teacher map gives the image's concept counts ``c``; the match probability is
``sigmoid(s * (cos(q, c) - m))``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .losses import match_probability
from .numerics import DegenerateInputError, DimensionError, Tensor

CONCEPT_NAMES = (
    "cat", "dog", "ball", "tree", "car", "cup", "lamp", "hat", "boat", "bird",
    "chair", "clock", "kite", "shoe", "book", "fish",
)
PROMPT_WORDS = ("a", "photo", "of")
FUNCTION_WORDS = ("a", "photo", "of", "that", "add", "remove", "replace", "with")
NEGATORS = ("remove", "replace")
GATE_SHARPNESS = 40.0
GATE_THRESHOLD = 0.75
REPLACE_NEGATION = 0.9
HEAD_WIDTH = 64
HEAD_GAIN = 1.0
HEAD_BETA = 2.0
MATCH_SHARPNESS = 40.0
MATCH_MARGIN = 0.93


class VocabularyError(KeyError):
    """A word is not in the fixed word table."""


def concept_words(n_concepts: int) -> tuple[str, ...]:
    base = CONCEPT_NAMES[:n_concepts]
    extra = tuple(f"concept{i}" for i in range(len(base), n_concepts))
    return base + extra


def _orthonormal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


@dataclass(frozen=True)
class TeacherShape:
    n_concepts: int = 6
    word_dim: int = 16
    joint_dim: int = 16
    map_channels: int = 8
    grid: int = 8
    object_size: int = 2


@dataclass(eq=False)
class TeacherBundle:
    """Frozen word table, text projection, visual map projection and matcher."""

    shape: TeacherShape
    seed: int
    words: tuple[str, ...]
    embeddings: np.ndarray      # V x d_w, unit rows
    text_proj: np.ndarray       # d_w x d
    text_bias: np.ndarray       # d, orthogonal to range(text_proj)
    negation: np.ndarray        # d_w
    map_proj: np.ndarray        # d_w x C_t
    map_offset: np.ndarray      # C_t
    match: np.ndarray           # C_t x n: pooled map -> concept counts
    token_read: np.ndarray      # d_w x n: word vector -> concept coordinates
    match_scale: np.ndarray     # scalar sharpness of the matcher
    match_margin: np.ndarray    # scalar cosine at which p = 1/2
    head_in: np.ndarray         # d x HEAD_WIDTH
    head_phase: np.ndarray      # HEAD_WIDTH
    head_out: np.ndarray        # HEAD_WIDTH x d, pre-scaled
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {w: i for i, w in enumerate(self.words)}
        for arr in self.arrays().values():
            arr.setflags(write=False)

    # -- vocabulary ---------------------------------------------------------
    def word_id(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise VocabularyError(word) from None

    def rows(self, words) -> np.ndarray:
        ids = [self.word_id(w) for w in words]
        return self.embeddings[ids].reshape(len(ids), self.shape.word_dim)

    @property
    def concept_words(self) -> tuple[str, ...]:
        return self.words[: self.shape.n_concepts]

    @property
    def concept_rows(self) -> np.ndarray:
        return self.embeddings[: self.shape.n_concepts]

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "embeddings": self.embeddings,
            "text_proj": self.text_proj,
            "text_bias": self.text_bias,
            "negation": self.negation,
            "map_proj": self.map_proj,
            "map_offset": self.map_offset,
            "match": self.match,
            "token_read": self.token_read,
            "match_scale": self.match_scale,
            "match_margin": self.match_margin,
            "head_in": self.head_in,
            "head_phase": self.head_phase,
            "head_out": self.head_out,
        }

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(",".join(self.words).encode())
        for name, arr in self.arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    # -- encoders -----------------------------------------------------------
    def teacher_text(self, tokens) -> Tensor:
        """Unit text feature(s) for token rows shaped (…, n, d_w)."""
        x = nx.as_tensor(tokens)
        if x.ndim < 2 or x.shape[-2] == 0:
            raise DegenerateInputError("text encoder needs a non-empty token sequence")
        if x.shape[-1] != self.shape.word_dim:
            raise DimensionError(f"token width {x.shape[-1]} != word dim {self.shape.word_dim}")
        xh = nx.l2_normalize(x, axis=-1)
        n = x.shape[-2]
        if n > 1:
            lead = xh[..., :-1, :] @ self.negation.reshape(-1, 1)
            flip = nx.sigmoid(nx.scale(lead - GATE_THRESHOLD, GATE_SHARPNESS))
            gate_rest = 1.0 - nx.scale(flip, 2.0)
            ones = np.ones(x.shape[:-2] + (1, 1))
            gate = nx.concat([ones, gate_rest], axis=-2)
            pooled = nx.sum(gate * xh, axis=-2)
        else:
            pooled = nx.sum(xh, axis=-2)
        if pooled.ndim == 1:
            return nx.reshape(self._joint(nx.reshape(pooled, (1, -1))), (-1,))
        return self._joint(pooled)

    def _joint(self, pooled) -> Tensor:
        h = nx.as_tensor(pooled) @ self.text_proj + self.text_bias
        return nx.l2_normalize(h + nx.cos(h @ self.head_in + self.head_phase) @ self.head_out, axis=-1)

    def joint_feature(self, pooled: np.ndarray) -> np.ndarray:
        """Unit joint feature for already-pooled word-space vector(s)."""
        pooled = np.asarray(pooled, dtype=np.float64)
        out = self._joint(pooled.reshape(-1, pooled.shape[-1])).data
        return out.reshape(pooled.shape[:-1] + out.shape[-1:])

    def encode_words(self, words) -> np.ndarray:
        return self.teacher_text(self.rows(words)).data

    def caption(self, concepts) -> tuple[str, ...]:
        return tuple(self.concept_words[c] for c in sorted(set(concepts)))

    def teacher_visual(self, concepts) -> np.ndarray:
        """Unit image feature for one concept collection (order and repeats ignored)."""
        ids = sorted(set(int(c) for c in concepts))
        if not ids:
            raise DegenerateInputError("image has no foreground concept")
        return self.joint_feature(self.concept_rows[ids].sum(axis=0))

    def teacher_map(self, grids: np.ndarray) -> np.ndarray:
        """F^v for grid(s) of concept ids (-1 = background): (…, H, W, C_t)."""
        grids = np.asarray(grids)
        cells = np.zeros(grids.shape + (self.shape.word_dim,))
        fg = grids >= 0
        cells[fg] = self.concept_rows[grids[fg]]
        return cells @ self.map_proj + self.map_offset

    def match_targets(self, fmaps: np.ndarray) -> np.ndarray:
        """Concept counts read from mean-pooled teacher map(s): (…, n)."""
        pooled = np.asarray(fmaps).mean(axis=(-3, -2))
        return pooled @ self.match

    def token_coordinates(self, U) -> Tensor:
        """Concept coordinates of the summed unit tokens, U (…, L, d_w) -> (…, n)."""
        U = nx.as_tensor(U)
        if U.shape[-1] != self.shape.word_dim:
            raise DimensionError("token width does not match matcher")
        if U.ndim == 2:
            return nx.reshape(self.token_coordinates(nx.reshape(U, (1,) + U.shape)), (-1,))
        return nx.sum(nx.l2_normalize(U, axis=-1), axis=-2) @ self.token_read

    def teacher_match(self, U, fmap) -> Tensor:
        """p = sigmoid(s * (cos(q(U), M meanpool(F^v)) - m)) for U (…, L, d_w)."""
        return match_probability(self.token_coordinates(U), self.match_targets(fmap),
                                 float(self.match_scale), float(self.match_margin))


def build_teacher(shape: TeacherShape, seed: int) -> TeacherBundle:
    """Deterministic teacher for ``(shape, seed)``."""
    n_fn = len(FUNCTION_WORDS)
    d_w, d, c_t = shape.word_dim, shape.joint_dim, shape.map_channels
    m_c = shape.n_concepts if shape.n_concepts + n_fn <= d_w else d_w - n_fn
    if m_c < 2:
        raise ValueError(f"word_dim {d_w} too small for {shape.n_concepts} concepts")
    if d < m_c + 1:
        raise ValueError("joint_dim must exceed the concept subspace dimension")
    if c_t < m_c + 1:
        raise ValueError("map_channels must exceed the concept subspace dimension")
    rng = np.random.default_rng([seed, 0x7EAC])
    basis = _orthonormal(rng, d_w)
    concept_basis = basis[:, :m_c]                 # d_w x m_c
    function_basis = basis[:, m_c:]                # d_w x (d_w - m_c)

    if shape.n_concepts <= m_c:
        coords = _orthonormal(rng, m_c)[:, : shape.n_concepts].T
    else:
        coords = rng.standard_normal((shape.n_concepts, m_c))
        coords /= np.linalg.norm(coords, axis=1, keepdims=True)
    concept_rows = coords @ concept_basis.T

    fn_rows = {}
    slot = iter(range(function_basis.shape[1]))
    neg = function_basis[:, next(slot)]
    for w in FUNCTION_WORDS:
        if w == "remove":
            fn_rows[w] = neg
        elif w == "replace":
            fn_rows[w] = (REPLACE_NEGATION * neg
                          + math.sqrt(1.0 - REPLACE_NEGATION ** 2) * function_basis[:, next(slot)])
        else:
            fn_rows[w] = function_basis[:, next(slot)]

    words = concept_words(shape.n_concepts) + FUNCTION_WORDS
    embeddings = np.vstack([concept_rows] + [fn_rows[w] for w in FUNCTION_WORDS])

    joint = _orthonormal(rng, d)
    text_proj = concept_basis @ joint[:, :m_c].T   # isometry on concept subspace
    text_bias = joint[:, m_c].copy()

    mix = _orthonormal(rng, c_t)
    map_proj = concept_basis @ mix[:m_c]           # d_w x C_t
    offset_dir = mix[m_c]
    map_offset = offset_dir.copy()
    # pooled-map concept mass is object_area/HW per concept; rescale to counts
    gain = shape.grid * shape.grid / float(shape.object_size ** 2)
    match = gain * mix[:m_c].T @ np.linalg.pinv(coords)
    token_read = np.linalg.pinv(concept_rows)

    head_in = rng.standard_normal((d, HEAD_WIDTH)) * HEAD_GAIN
    head_phase = rng.uniform(0.0, 2.0 * math.pi, HEAD_WIDTH)
    # orthonormal columns scaled so the head output has norm ~HEAD_BETA
    q, _ = np.linalg.qr(rng.standard_normal((HEAD_WIDTH, d)))
    head_out = q * HEAD_BETA * math.sqrt(2.0 / d)

    return TeacherBundle(
        shape=shape, seed=seed, words=words, embeddings=embeddings,
        text_proj=text_proj, text_bias=text_bias, negation=neg.copy(),
        map_proj=map_proj, map_offset=map_offset, match=match,
        token_read=token_read, match_scale=np.array(MATCH_SHARPNESS),
        match_margin=np.array(MATCH_MARGIN),
        head_in=head_in, head_phase=head_phase, head_out=head_out,
    )


# ---------------------------------------------------------------------------
# light encoder
# ---------------------------------------------------------------------------

LIGHT_PARAM_NAMES = ("L1_w", "L1_b", "L2_w", "L2_b")


def init_light_params(in_channels: int, channels: int, rng: np.random.Generator,
                      width: int | None = None) -> dict[str, np.ndarray]:
    """1x1 conv (in -> width), GELU, 3x3 same-padded conv (width -> channels)."""
    width = width or channels
    b1 = 1.0 / math.sqrt(in_channels)
    b2 = 1.0 / math.sqrt(9 * width)
    return {
        "L1_w": rng.uniform(-b1, b1, size=(in_channels, width)),
        "L1_b": rng.uniform(-b1, b1, size=(width,)),
        "L2_w": rng.uniform(-b2, b2, size=(9 * width, channels)),
        "L2_b": rng.uniform(-b2, b2, size=(channels,)),
    }


def one_hot_grids(grids: np.ndarray, n_concepts: int) -> np.ndarray:
    """(…, H, W) concept ids with -1 background -> (…, H, W, n_concepts)."""
    grids = np.asarray(grids)
    out = np.zeros(grids.shape + (n_concepts,))
    fg = grids >= 0
    out[fg, grids[fg]] = 1.0
    return out


def light_encode(inputs, params) -> Tensor:
    """(B, H, W, C_in) or (H, W, C_in) input planes -> feature map F^LE."""
    x = nx.as_tensor(inputs)
    single = x.ndim == 3
    if single:
        x = nx.reshape(x, (1,) + x.shape)
    if x.shape[-1] != params["L1_w"].shape[0]:
        raise DimensionError(f"input has {x.shape[-1]} channels, encoder expects {params['L1_w'].shape[0]}")
    h = nx.gelu(x @ params["L1_w"] + params["L1_b"])
    out = nx.patches3x3(h) @ params["L2_w"] + params["L2_b"]
    if single:
        out = nx.reshape(out, out.shape[1:])
    return out
