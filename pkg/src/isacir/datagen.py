"""Planted-semantics composed-retrieval benchmark.

Images are H x W grids of concept ids (-1 is background). Each foreground
concept is drawn once as a square object, so an image's semantics is the
set of its concepts. Evaluation triplets pair a gallery reference with a
templated edit; the targets are found by set algebra over the gallery.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np

from .encoders import concept_words

TEMPLATES = ("add", "remove", "replace")


class GenerationError(RuntimeError):
    pass


class ModifierFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_concepts: int = 6
    grid: int = 8
    object_size: int = 2
    max_concepts: int = 4
    n_train: int = 2000
    n_gallery: int = 128
    n_queries: int = 500
    max_duplicates: int = 3
    seed: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SyntheticImage:
    id: str
    grid: np.ndarray

    @property
    def concepts(self) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unique(self.grid) if c >= 0)

    def __eq__(self, other):
        return (isinstance(other, SyntheticImage) and self.id == other.id
                and np.array_equal(self.grid, other.grid))

    def __hash__(self):
        return hash(self.id)


@dataclass(frozen=True)
class TripletRecord:
    reference_id: str
    modifier: tuple[str, ...]
    target_ids: tuple[str, ...]


@dataclass
class Dataset:
    config: DataConfig
    train: list[SyntheticImage]
    gallery: list[SyntheticImage]
    triplets: list[TripletRecord]

    def gallery_by_id(self) -> dict[str, SyntheticImage]:
        return {img.id: img for img in self.gallery}


def all_concept_sets(n_concepts: int, max_concepts: int) -> list[tuple[int, ...]]:
    return [c for k in range(1, max_concepts + 1)
            for c in itertools.combinations(range(n_concepts), k)]


def render(concepts, cfg: DataConfig, rng: np.random.Generator, retries: int = 200) -> np.ndarray:
    """Place one square object per concept at random non-overlapping positions."""
    s, g = cfg.object_size, cfg.grid
    for _ in range(retries):
        grid = np.full((g, g), -1, dtype=np.int64)
        ok = True
        for c in concepts:
            for _ in range(50):
                y, x = rng.integers(0, g - s + 1, size=2)
                if np.all(grid[y:y + s, x:x + s] < 0):
                    grid[y:y + s, x:x + s] = c
                    break
            else:
                ok = False
                break
        if ok:
            return grid
    raise GenerationError(f"cannot place {len(concepts)} objects of size {s} on a {g}x{g} grid")


def _random_set(rng: np.random.Generator, cfg: DataConfig) -> tuple[int, ...]:
    k = int(rng.integers(1, cfg.max_concepts + 1))
    return tuple(sorted(int(c) for c in rng.choice(cfg.n_concepts, size=k, replace=False)))


def parse_modifier(modifier, words: tuple[str, ...]) -> tuple[str, int | None, int | None]:
    """-> (template, removed concept, added concept)."""
    index = {w: i for i, w in enumerate(words)}
    tokens = tuple(modifier)

    def concept(word):
        if word not in index:
            raise ModifierFormatError(f"unknown concept word {word!r} in {tokens}")
        return index[word]

    if len(tokens) == 2 and tokens[0] == "add":
        return "add", None, concept(tokens[1])
    if len(tokens) == 2 and tokens[0] == "remove":
        return "remove", concept(tokens[1]), None
    if len(tokens) == 4 and tokens[0] == "replace" and tokens[2] == "with":
        return "replace", concept(tokens[1]), concept(tokens[3])
    raise ModifierFormatError(f"modifier {tokens} matches no template")


def apply_edit(concepts, modifier, words) -> frozenset[int] | None:
    """Edited concept set, or None when the edit is not applicable."""
    template, gone, new = parse_modifier(modifier, words)
    current = set(concepts)
    if gone is not None and gone not in current:
        return None
    if new is not None and new in current:
        return None
    if gone is not None and new is not None and gone == new:
        return None
    current.discard(gone)
    if new is not None:
        current.add(new)
    return frozenset(current) if current else None


def oracle_targets(reference: SyntheticImage, modifier, gallery, n_concepts: int) -> frozenset[str]:
    """Gallery ids whose concept set equals the edited reference set."""
    edited = apply_edit(reference.concepts, modifier, concept_words(n_concepts))
    if edited is None:
        return frozenset()
    return frozenset(img.id for img in gallery
                     if img.id != reference.id and frozenset(img.concepts) == edited)


def _random_modifier(concepts, cfg: DataConfig, rng: np.random.Generator) -> tuple[str, ...]:
    words = concept_words(cfg.n_concepts)
    present = list(concepts)
    absent = [c for c in range(cfg.n_concepts) if c not in concepts]
    options = []
    if absent and len(present) < cfg.max_concepts:
        options.append("add")
    if len(present) > 1:
        options.append("remove")
    if absent:
        options.append("replace")
    template = options[int(rng.integers(len(options)))]
    if template == "add":
        return ("add", words[absent[int(rng.integers(len(absent)))]])
    if template == "remove":
        return ("remove", words[present[int(rng.integers(len(present)))]])
    return ("replace", words[present[int(rng.integers(len(present)))]],
            "with", words[absent[int(rng.integers(len(absent)))]])


def gen_dataset(cfg: DataConfig, max_retries: int = 100) -> Dataset:
    if cfg.n_concepts < 4:
        raise GenerationError("need at least 4 concepts")
    if cfg.max_concepts * cfg.object_size ** 2 > cfg.grid ** 2:
        raise GenerationError("objects do not fit on the grid")
    root = np.random.SeedSequence(cfg.seed)
    rng_train, rng_gallery, rng_query = (np.random.default_rng(s) for s in root.spawn(3))

    train = [SyntheticImage(f"t{i:05d}", render(_random_set(rng_train, cfg), cfg, rng_train))
             for i in range(cfg.n_train)]

    sets = all_concept_sets(cfg.n_concepts, cfg.max_concepts)
    if cfg.n_gallery > cfg.max_duplicates * len(sets):
        raise GenerationError("gallery larger than the duplicate cap allows")
    order = [sets[i] for i in rng_gallery.permutation(len(sets))]
    chosen = order[: cfg.n_gallery]
    counts = {s: 1 for s in chosen}
    while len(chosen) < cfg.n_gallery:
        s = sets[int(rng_gallery.integers(len(sets)))]
        if counts.get(s, 0) and counts[s] < cfg.max_duplicates:
            counts[s] += 1
            chosen.append(s)
    chosen = [chosen[i] for i in rng_gallery.permutation(len(chosen))]
    gallery = [SyntheticImage(f"g{i:04d}", render(s, cfg, rng_gallery)) for i, s in enumerate(chosen)]

    triplets = []
    for _ in range(cfg.n_queries):
        for _ in range(max_retries):
            ref = gallery[int(rng_query.integers(len(gallery)))]
            modifier = _random_modifier(ref.concepts, cfg, rng_query)
            targets = oracle_targets(ref, modifier, gallery, cfg.n_concepts)
            if targets:
                triplets.append(TripletRecord(ref.id, modifier, tuple(sorted(targets))))
                break
        else:
            raise GenerationError(f"no feasible triplet after {max_retries} attempts")
    return Dataset(cfg, train, gallery, triplets)


def validate(dataset: Dataset) -> list[str]:
    """Brute-force check of every triplet invariant; returns problems found."""
    problems = []
    by_id = dataset.gallery_by_id()
    cfg = dataset.config
    for img in dataset.train + dataset.gallery:
        if not 1 <= len(img.concepts) <= cfg.max_concepts:
            problems.append(f"{img.id}: {len(img.concepts)} concepts")
        if img.grid.shape != (cfg.grid, cfg.grid):
            problems.append(f"{img.id}: grid shape {img.grid.shape}")
    for k, tr in enumerate(dataset.triplets):
        ref = by_id.get(tr.reference_id)
        if ref is None:
            problems.append(f"triplet {k}: unknown reference {tr.reference_id}")
            continue
        if not tr.target_ids:
            problems.append(f"triplet {k}: no targets")
        if tr.reference_id in tr.target_ids:
            problems.append(f"triplet {k}: reference among targets")
        expected = oracle_targets(ref, tr.modifier, dataset.gallery, cfg.n_concepts)
        if set(tr.target_ids) != expected:
            problems.append(f"triplet {k}: stored targets differ from oracle")
    return problems


def composition_gap_counts(dataset: Dataset) -> dict[str, int]:
    """Counts showing neither the reference nor the modifier alone suffices.

    ``image_insufficient``: triplets whose targets differ in concept set
    from the reference. ``text_ambiguous``: triplets where more gallery
    images contain the modifier's added concept than there are targets.
    """
    by_id = dataset.gallery_by_id()
    words = concept_words(dataset.config.n_concepts)
    image_insufficient = text_ambiguous = 0
    for tr in dataset.triplets:
        ref = by_id[tr.reference_id]
        target_set = set(by_id[tr.target_ids[0]].concepts)
        if target_set != set(ref.concepts):
            image_insufficient += 1
        _, gone, new = parse_modifier(tr.modifier, words)
        probe = new if new is not None else gone
        matching = sum(1 for img in dataset.gallery
                       if (probe in img.concepts) == (new is not None))
        if matching > len(tr.target_ids):
            text_ambiguous += 1
    return {"triplets": len(dataset.triplets), "image_insufficient": image_insufficient,
            "text_ambiguous": text_ambiguous,
            "multi_target": sum(1 for tr in dataset.triplets if len(tr.target_ids) > 1)}
