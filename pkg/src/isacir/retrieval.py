"""Asymmetric inference: compose queries, search the gallery, score rankings.

The gallery side (index build) only touches the teacher; the query side
runs the student and the teacher text encoder. The two meet in the joint
feature space through an exhaustive inner-product scan.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .datagen import SyntheticImage, TripletRecord
from .encoders import PROMPT_WORDS, TeacherBundle
from .model import ModelConfig, student_tokens

log = logging.getLogger(__name__)

CONNECTIVE = "that"


class IndexBuildError(ValueError):
    pass


class FingerprintMismatch(ValueError):
    pass


@dataclass
class GalleryIndex:
    ids: list[str]
    vectors: np.ndarray
    seed: int
    fingerprint: str

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise IndexBuildError("gallery ids are not unique")
        if self.vectors.shape[0] != len(self.ids):
            raise IndexBuildError("one vector per id required")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class RankedList:
    ids: list[str]
    scores: np.ndarray
    truncated: bool = False


def build_index(gallery: list[SyntheticImage], teacher: TeacherBundle) -> GalleryIndex:
    if not gallery:
        raise IndexBuildError("gallery is empty")
    ids = [img.id for img in gallery]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise IndexBuildError(f"duplicate gallery ids: {dupes[:5]}")
    vectors = np.stack([teacher.teacher_visual(img.concepts) for img in gallery])
    return GalleryIndex(ids, vectors, teacher.seed, teacher.fingerprint())


def composed_tokens(teacher: TeacherBundle, U: np.ndarray, modifier) -> np.ndarray:
    """[prompt] u_1..u_L that [modifier] as token rows."""
    U = np.asarray(U)
    parts = [teacher.rows(PROMPT_WORDS), U, teacher.rows((CONNECTIVE,))]
    if len(modifier):
        parts.append(teacher.rows(modifier))
    return np.concatenate(parts, axis=0)


def sentence_tokens(images: list[SyntheticImage], params, model_cfg: ModelConfig,
                    teacher: TeacherBundle) -> np.ndarray:
    grids = np.stack([img.grid for img in images])
    return student_tokens(params, model_cfg, teacher, grids).tokens.data


def compose_and_encode(reference: SyntheticImage, modifier, params, model_cfg: ModelConfig,
                       teacher: TeacherBundle, tokens: np.ndarray | None = None) -> np.ndarray:
    """Unit query feature for one (reference, modifier) pair."""
    for w in modifier:
        teacher.word_id(w)
    U = tokens if tokens is not None else sentence_tokens([reference], params, model_cfg, teacher)[0]
    return teacher.teacher_text(composed_tokens(teacher, U, modifier)).data


def _check(index: GalleryIndex, fingerprint: str | None) -> None:
    if fingerprint is not None and fingerprint != index.fingerprint:
        raise FingerprintMismatch(f"query teacher {fingerprint} != gallery teacher {index.fingerprint}")


def search(index: GalleryIndex, query: np.ndarray, k: int,
           fingerprint: str | None = None) -> RankedList:
    """Exact top-k by inner product; ties broken by ascending id."""
    _check(index, fingerprint)
    n = len(index)
    truncated = k > n
    if truncated:
        log.warning("k=%d exceeds gallery size %d; truncating", k, n)
    k = min(k, n)
    scores = index.vectors.astype(np.float64) @ np.asarray(query, dtype=np.float64)
    order = np.lexsort((np.asarray(index.ids), -scores))[:k]
    return RankedList([index.ids[i] for i in order], scores[order], truncated)


def search_many(index: GalleryIndex, queries: np.ndarray, k: int,
                fingerprint: str | None = None) -> list[RankedList]:
    return [search(index, q, k, fingerprint) for q in np.atleast_2d(queries)]


def recall_at_k(results: list[RankedList], triplets: list[TripletRecord], k: int) -> float:
    if not triplets:
        return 0.0
    hits = sum(1 for r, tr in zip(results, triplets, strict=True) if set(r.ids[:k]) & set(tr.target_ids))
    return hits / len(triplets)


def average_precision_at_k(ranked: list[str], targets, k: int) -> float:
    targets = set(targets)
    if not targets:
        return 0.0
    hits, score = 0, 0.0
    for i, doc in enumerate(ranked[:k], start=1):
        if doc in targets:
            hits += 1
            score += hits / i
    return score / min(k, len(targets))


def map_at_k(results: list[RankedList], triplets: list[TripletRecord], k: int) -> float:
    if not triplets:
        return 0.0
    return float(np.mean([average_precision_at_k(r.ids, tr.target_ids, k)
                          for r, tr in zip(results, triplets, strict=True)]))


RECALL_KS = (1, 5, 10, 50)
BASELINES = ("image-only", "text-only", "image+text")
MAP_KS = (5, 10, 25, 50)


def metric_table(results: list[RankedList], triplets: list[TripletRecord]) -> dict[str, float]:
    out = {f"recall@{k}": recall_at_k(results, triplets, k) for k in RECALL_KS}
    out.update({f"map@{k}": map_at_k(results, triplets, k) for k in MAP_KS})
    return out


def model_queries(triplets: list[TripletRecord], gallery_by_id: dict[str, SyntheticImage], params,
                  model_cfg: ModelConfig, teacher: TeacherBundle) -> np.ndarray:
    refs = sorted({tr.reference_id for tr in triplets})
    tokens = dict(zip(refs, sentence_tokens([gallery_by_id[r] for r in refs], params, model_cfg, teacher))) if refs else {}
    return np.array([compose_and_encode(gallery_by_id[tr.reference_id], tr.modifier, params, model_cfg,
                                        teacher, tokens[tr.reference_id]) for tr in triplets])


def evaluate_model(triplets, gallery_by_id, index: GalleryIndex, params, model_cfg: ModelConfig,
                   teacher: TeacherBundle, k: int = 50) -> dict[str, float]:
    queries = model_queries(triplets, gallery_by_id, params, model_cfg, teacher)
    return metric_table(search_many(index, queries, k, teacher.fingerprint()), triplets)


def baseline_queries(kind: str, triplets, gallery_by_id, teacher: TeacherBundle) -> np.ndarray:
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}")
    rows = []
    for tr in triplets:
        ref = gallery_by_id[tr.reference_id]
        if kind == "image-only":
            q = teacher.teacher_visual(ref.concepts)
        elif kind == "text-only":
            q = teacher.encode_words(tr.modifier)
        elif kind == "image+text":
            q = teacher.teacher_visual(ref.concepts) + teacher.encode_words(tr.modifier)
            q = q / np.linalg.norm(q)
        rows.append(q)
    return np.array(rows)


def baselines(triplets, index: GalleryIndex, teacher: TeacherBundle, gallery_by_id,
              k: int = 50) -> dict[str, dict[str, float]]:
    return {kind: metric_table(search_many(index, baseline_queries(kind, triplets, gallery_by_id, teacher),
                                           k, teacher.fingerprint()), triplets)
            for kind in BASELINES}
