import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from isacir import datagen as dg
from isacir.datagen import DataConfig, GenerationError, ModifierFormatError, SyntheticImage
from isacir.encoders import concept_words

WORDS = concept_words(6)


@pytest.fixture(scope="module")
def default_data():
    return dg.gen_dataset(DataConfig())


def image(ident, concepts, size=8):
    grid = np.full((size, size), -1)
    for k, c in enumerate(concepts):
        grid[2 * k:2 * k + 2, 0:2] = c
    return SyntheticImage(ident, grid)


class TestDefaultDataset:
    def test_sizes(self, default_data):
        d = default_data
        assert (len(d.train), len(d.gallery), len(d.triplets)) == (2000, 128, 500)

    def test_validates_cleanly(self, default_data):
        assert dg.validate(default_data) == []

    def test_gallery_respects_duplicate_cap(self, default_data):
        sets = [img.concepts for img in default_data.gallery]
        assert max(sets.count(s) for s in set(sets)) <= 3

    def test_unique_ids(self, default_data):
        ids = [img.id for img in default_data.train + default_data.gallery]
        assert len(ids) == len(set(ids))

    def test_objects_are_whole_squares(self, default_data):
        for img in default_data.gallery[:40]:
            for c in img.concepts:
                ys, xs = np.nonzero(img.grid == c)
                assert len(ys) == 4 and ys.max() - ys.min() == 1 and xs.max() - xs.min() == 1

    def test_all_templates_and_multi_target(self, default_data):
        templates = {tr.modifier[0] for tr in default_data.triplets}
        assert templates == set(dg.TEMPLATES)
        assert any(len(tr.target_ids) > 1 for tr in default_data.triplets)

    def test_composition_gap(self, default_data):
        counts = dg.composition_gap_counts(default_data)
        assert counts["triplets"] == 500
        assert counts["image_insufficient"] == 500
        assert counts["text_ambiguous"] > 250
        assert counts["multi_target"] > 0

    def test_targets_agree_with_set_algebra_oracle(self, default_data):
        by_id = default_data.gallery_by_id()
        for tr in default_data.triplets:
            ref = by_id[tr.reference_id]
            edited = oracles.edit(ref.concepts, tr.modifier, WORDS)
            expected = {img.id for img in default_data.gallery
                        if img.id != ref.id and frozenset(img.concepts) == edited}
            assert set(tr.target_ids) == expected


class TestDeterminism:
    def test_same_seed_same_data(self):
        cfg = DataConfig(n_train=30, n_gallery=40, n_queries=20, seed=5)
        a, b = dg.gen_dataset(cfg), dg.gen_dataset(cfg)
        assert a.train == b.train and a.gallery == b.gallery and a.triplets == b.triplets

    def test_seed_changes_data(self):
        a = dg.gen_dataset(DataConfig(n_train=30, n_gallery=40, n_queries=20, seed=1))
        b = dg.gen_dataset(DataConfig(n_train=30, n_gallery=40, n_queries=20, seed=2))
        assert a.train != b.train

    def test_zero_queries(self):
        d = dg.gen_dataset(DataConfig(n_train=10, n_gallery=40, n_queries=0))
        assert d.triplets == [] and dg.validate(d) == []


class TestEdits:
    @pytest.mark.parametrize("concepts,modifier,expected", [
        ((0, 1), ("add", "ball"), {0, 1, 2}),
        ((0, 1), ("add", "cat"), None),
        ((0, 1), ("remove", "cat"), {1}),
        ((0,), ("remove", "cat"), None),
        ((0, 1), ("remove", "tree"), None),
        ((0, 1), ("replace", "cat", "with", "cup"), {1, 5}),
        ((0, 1), ("replace", "cat", "with", "dog"), None),
        ((0, 1), ("replace", "ball", "with", "cup"), None),
    ])
    def test_table(self, concepts, modifier, expected):
        got = dg.apply_edit(concepts, modifier, WORDS)
        assert got == (None if expected is None else frozenset(expected))
        assert got == oracles.edit(concepts, modifier, WORDS)

    @given(st.sets(st.integers(0, 5), min_size=1, max_size=4),
           st.sampled_from(["add", "remove", "replace"]), st.integers(0, 5), st.integers(0, 5))
    def test_matches_oracle(self, concepts, template, a, b):
        if template == "replace":
            modifier = ("replace", WORDS[a], "with", WORDS[b])
        else:
            modifier = (template, WORDS[a])
        assert dg.apply_edit(sorted(concepts), modifier, WORDS) == oracles.edit(sorted(concepts), modifier, WORDS)

    @pytest.mark.parametrize("modifier", [("add",), ("add", "zebra"), ("swap", "cat"),
                                          ("replace", "cat", "by", "dog"), ()])
    def test_malformed(self, modifier):
        with pytest.raises(ModifierFormatError):
            dg.parse_modifier(modifier, WORDS)

    def test_oracle_targets_exclude_reference(self):
        ref = image("r", [0, 1])
        gallery = [ref, image("a", [0, 1, 2]), image("b", [2, 1, 0]), image("c", [0, 2])]
        assert dg.oracle_targets(ref, ("add", "ball"), gallery, 6) == {"a", "b"}
        assert dg.oracle_targets(ref, ("add", "cat"), gallery, 6) == frozenset()


class TestErrors:
    def test_too_few_concepts(self):
        with pytest.raises(GenerationError):
            dg.gen_dataset(DataConfig(n_concepts=3))

    def test_objects_do_not_fit(self):
        with pytest.raises(GenerationError):
            dg.gen_dataset(DataConfig(grid=3, max_concepts=4))

    def test_gallery_too_large(self):
        with pytest.raises(GenerationError):
            dg.gen_dataset(DataConfig(n_train=1, n_gallery=10_000))

    def test_render_failure(self):
        cfg = DataConfig(grid=4, object_size=2, max_concepts=4)
        with pytest.raises(GenerationError):
            dg.render((0, 1, 2, 3, 4), cfg, np.random.default_rng(0), retries=3)

    def test_validate_reports_tampering(self):
        d = dg.gen_dataset(DataConfig(n_train=5, n_gallery=40, n_queries=5))
        tr = d.triplets[0]
        d.triplets[0] = dg.TripletRecord(tr.reference_id, tr.modifier, tr.target_ids + (tr.reference_id,))
        problems = dg.validate(d)
        assert any("reference among targets" in p for p in problems)
        assert any("differ from oracle" in p for p in problems)
