import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from isacir import config, pipeline
from isacir import retrieval as rv
from isacir.datagen import SyntheticImage, TripletRecord, gen_dataset
from isacir.encoders import TeacherShape, VocabularyError, build_teacher
from isacir.retrieval import FingerprintMismatch, GalleryIndex, IndexBuildError, RankedList


def random_index(r, n, d=8):
    ids = [f"g{i:04d}" for i in r.permutation(n)]
    return GalleryIndex(ids, r.normal(size=(n, d)), 0, "fp")


def ranked(ids):
    return RankedList(list(ids), np.zeros(len(ids)))


@pytest.fixture(scope="module")
def teacher():
    return build_teacher(TeacherShape(), 0)


@pytest.fixture(scope="module")
def tiny_run():
    cfg = config.profile("tiny")
    data = gen_dataset(cfg.data)
    ckpt = pipeline.train_model(cfg, data)
    return cfg, data, ckpt, pipeline.make_teacher(cfg)


class TestSearch:
    def test_brute_force_oracle_50_instances(self):
        r = np.random.default_rng(7)
        for _ in range(50):
            n = int(r.integers(1, 257))
            index = random_index(r, n)
            q = r.normal(size=8)
            k = int(r.integers(1, n + 1))
            got = rv.search(index, q, k)
            expected = oracles.brute_force_rank(index.ids, index.vectors.tolist(), q.tolist())[:k]
            assert got.ids == expected
            assert np.all(np.diff(got.scores) <= 0)

    def test_self_match_ranks_first(self):
        r = np.random.default_rng(3)
        index = random_index(r, 30)
        index.vectors /= np.linalg.norm(index.vectors, axis=1, keepdims=True)
        for i in range(30):
            assert rv.search(index, index.vectors[i], 1).ids == [index.ids[i]]

    def test_k_equals_n_is_permutation(self):
        index = random_index(np.random.default_rng(4), 17)
        out = rv.search(index, np.ones(8), 17)
        assert sorted(out.ids) == sorted(index.ids) and not out.truncated

    def test_k_above_n_truncates_with_warning(self, caplog):
        index = random_index(np.random.default_rng(5), 4)
        with caplog.at_level(logging.WARNING, logger="isacir.retrieval"):
            out = rv.search(index, np.ones(8), 10)
        assert len(out.ids) == 4 and out.truncated
        assert "truncating" in caplog.text

    def test_ties_broken_by_id(self):
        index = GalleryIndex(["c", "a", "b"], np.ones((3, 2)), 0, "fp")
        assert rv.search(index, np.ones(2), 3).ids == ["a", "b", "c"]

    def test_fingerprint_mismatch(self):
        index = random_index(np.random.default_rng(6), 3)
        with pytest.raises(FingerprintMismatch):
            rv.search(index, np.ones(8), 1, fingerprint="other")


class TestIndex:
    def test_duplicate_ids(self, teacher):
        img = SyntheticImage("x", np.full((8, 8), -1))
        img.grid[0:2, 0:2] = 0
        with pytest.raises(IndexBuildError):
            rv.build_index([img, img], teacher)
        with pytest.raises(IndexBuildError):
            GalleryIndex(["a", "a"], np.zeros((2, 3)), 0, "fp")

    def test_empty(self, teacher):
        with pytest.raises(IndexBuildError):
            rv.build_index([], teacher)

    def test_vectors_are_teacher_features(self, teacher):
        grid = np.full((8, 8), -1)
        grid[0:2, 0:2], grid[4:6, 4:6] = 1, 4
        index = rv.build_index([SyntheticImage("a", grid)], teacher)
        np.testing.assert_array_equal(index.vectors[0], teacher.teacher_visual([1, 4]))
        assert index.fingerprint == teacher.fingerprint() and index.seed == 0


class TestMetrics:
    def test_ap_examples(self):
        assert rv.average_precision_at_k(["x", "a", "y", "b"], {"a", "b"}, 4) == pytest.approx(0.5)
        assert rv.average_precision_at_k(["a", "x", "b"], {"a", "b"}, 3) == pytest.approx((1 + 2 / 3) / 2)
        assert rv.average_precision_at_k(["a"], {"a"}, 5) == 1.0
        assert rv.average_precision_at_k(["x"], set(), 5) == 0.0

    def test_map_matches_oracle_50_instances(self):
        r = np.random.default_rng(11)
        for _ in range(50):
            n = int(r.integers(5, 60))
            pool = [f"g{i}" for i in range(n)]
            results, triplets, expected = [], [], []
            for _ in range(int(r.integers(1, 10))):
                order = list(r.permutation(pool))
                targets = tuple(r.choice(pool, size=int(r.integers(1, 4)), replace=False))
                results.append(ranked(order))
                triplets.append(TripletRecord("ref", ("add", "cat"), targets))
            k = int(r.integers(1, n + 1))
            expected = np.mean([oracles.average_precision(res.ids, set(t.target_ids), k)
                                for res, t in zip(results, triplets)])
            assert abs(rv.map_at_k(results, triplets, k) - expected) <= 1e-9

    def test_recall(self):
        results = [ranked(["a", "b", "c"]), ranked(["c", "b", "a"])]
        triplets = [TripletRecord("r", ("add", "cat"), ("b",)), TripletRecord("r", ("add", "cat"), ("a",))]
        assert [rv.recall_at_k(results, triplets, k) for k in (1, 2, 3)] == [0.0, 0.5, 1.0]

    def test_empty_is_zero(self):
        assert rv.recall_at_k([], [], 5) == 0.0 and rv.map_at_k([], [], 5) == 0.0

    @given(st.integers(0, 2**32 - 1))
    def test_recall_monotone_in_k(self, seed):
        r = np.random.default_rng(seed)
        pool = [f"g{i}" for i in range(20)]
        results = [ranked(r.permutation(pool)) for _ in range(6)]
        triplets = [TripletRecord("r", ("add", "cat"), tuple(r.choice(pool, size=2, replace=False)))
                    for _ in range(6)]
        values = [rv.recall_at_k(results, triplets, k) for k in range(1, 21)]
        assert all(a <= b for a, b in zip(values, values[1:])) and values[-1] == 1.0
        for k in (1, 5, 10):
            assert 0.0 <= rv.map_at_k(results, triplets, k) <= 1.0


class TestQueries:
    def test_composed_token_layout(self, teacher, rng):
        U = rng.normal(size=(3, 16))
        rows = rv.composed_tokens(teacher, U, ("remove", "cat"))
        assert rows.shape == (3 + 3 + 1 + 2, 16)
        np.testing.assert_array_equal(rows[3:6], U)
        np.testing.assert_array_equal(rows[6], teacher.rows(("that",))[0])

    def test_unknown_modifier_word(self, tiny_run):
        cfg, data, ckpt, teacher = tiny_run
        with pytest.raises(VocabularyError):
            rv.compose_and_encode(data.gallery[0], ("add", "zebra"), ckpt.params, cfg.model, teacher)

    def test_query_is_unit(self, tiny_run):
        cfg, data, ckpt, teacher = tiny_run
        q = rv.compose_and_encode(data.gallery[0], ("add", "cat"), ckpt.params, cfg.model, teacher)
        assert abs(np.linalg.norm(q) - 1) < 1e-12

    def test_batched_queries_equal_single(self, tiny_run):
        cfg, data, ckpt, teacher = tiny_run
        trs = data.triplets[:5]
        batch = rv.model_queries(trs, data.gallery_by_id(), ckpt.params, cfg.model, teacher)
        by_id = data.gallery_by_id()
        for q, tr in zip(batch, trs):
            single = rv.compose_and_encode(by_id[tr.reference_id], tr.modifier, ckpt.params, cfg.model, teacher)
            np.testing.assert_allclose(q, single, atol=1e-12)

    def test_metric_table_keys(self, tiny_run):
        cfg, data, ckpt, teacher = tiny_run
        table = pipeline.evaluate(cfg, data, ckpt.params, teacher, with_baselines=True)
        for row in ("model", "image-only", "text-only", "image+text"):
            for m in ("recall@1", "recall@5", "recall@10", "recall@50", "map@5", "map@10", "map@25",
                      "map@50", "avg_recall"):
                assert 0.0 <= table[f"{row}.{m}"] <= 1.0

    def test_image_only_never_hits_at_one(self, tiny_run):
        # the reference itself is the best image-only match and is never a target
        cfg, data, ckpt, teacher = tiny_run
        index = rv.build_index(data.gallery, teacher)
        table = rv.baselines(data.triplets, index, teacher, data.gallery_by_id())
        assert table["image-only"]["recall@1"] == 0.0

    def test_unknown_baseline(self, teacher):
        with pytest.raises(ValueError):
            rv.baseline_queries("sketch", [], {}, teacher)
