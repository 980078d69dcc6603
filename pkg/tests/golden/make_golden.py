"""Regenerate the frozen regression outputs: ``python tests/golden/make_golden.py``.

Only rerun after an intentional numerical change, and review the diff.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).parent


def compute() -> dict[str, np.ndarray]:
    from isacir import config, pipeline
    from isacir import encoders as enc
    from isacir import retrieval as rv
    from isacir import token_learner as tl
    from isacir.datagen import gen_dataset

    rng = np.random.default_rng(123)
    shape = tl.TokenLearnerShape(4, 3, 5, 6, 7)
    params = tl.init_params(shape, rng)
    fmap = rng.normal(size=(3, 3, 4))
    light = enc.init_light_params(6, 8, rng, 16)
    grid = rng.integers(-1, 6, size=(8, 8))

    cfg = config.profile("tiny")
    data = gen_dataset(cfg.data)
    ckpt = pipeline.train_model(cfg, data)
    teacher = pipeline.make_teacher(cfg)
    tr = data.triplets[0]
    ref = data.gallery_by_id()[tr.reference_id]
    history = history_array(ckpt.history)
    return {
        "forward_tokens": tl.forward(fmap, params).tokens.data,
        "light_map": enc.light_encode(enc.one_hot_grids(grid, 6), light).data,
        "query": rv.compose_and_encode(ref, tr.modifier, ckpt.params, cfg.model, teacher),
        "loss_history": history,
        "attention": pipeline.attention_rows(ckpt.params, cfg, teacher, data.gallery[3]),
    }


def history_array(history: list[dict]) -> np.ndarray:
    return np.array([[r[c] for c in ("epoch", "gcd", "lar", "total", "lr")] for r in history])


def compute_toy() -> dict[str, np.ndarray]:
    """Loss history of the reference toy run (seed 0); takes about half a minute."""
    from isacir import config, pipeline

    cfg = config.profile("toy").with_seed(0)
    return {"toy_loss_history": history_array(pipeline.train_model(cfg).history)}


if __name__ == "__main__":
    sys.path.insert(0, str(HERE.parents[1] / "src"))
    np.savez(HERE / "golden.npz", **compute())
    np.savez(HERE / "toy_golden.npz", **compute_toy())
    print(f"wrote {HERE / 'golden.npz'} and {HERE / 'toy_golden.npz'}")
