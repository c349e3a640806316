import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossmodal.retrieval import (
    FeatureTable,
    RetrievalError,
    average_precision,
    chance_map,
    cosine_sim,
    cross_modal_map,
    rank_targets,
    within_modal_map,
)


def table(feats_by_mod, labels_by_mod, layer="join"):
    mods, labels, feats = [], [], []
    for m in feats_by_mod:
        f = np.asarray(feats_by_mod[m], dtype=float)
        feats.append(f)
        labels.append(np.asarray(labels_by_mod[m]))
        mods.extend([m] * len(f))
    return FeatureTable(layer, mods, np.concatenate(labels), np.concatenate(feats))


def brute_ap(rel):
    # literal definition: mean over relevant ranks of precision at that rank
    rel = list(rel)
    precs = [sum(rel[: i + 1]) / (i + 1) for i, r in enumerate(rel) if r]
    return sum(precs) / len(precs) if precs else 0.0


class TestAveragePrecision:
    def test_examples(self):
        assert average_precision([1, 0, 1]) == pytest.approx(5 / 6, abs=1e-15)
        assert average_precision([1, 1, 0, 0]) == 1.0
        assert average_precision([0, 0, 0]) == 0.0
        assert average_precision([0, 1]) == 0.5

    def test_exhaustive_small(self):
        for n in range(1, 8):
            for rel in itertools.product([0, 1], repeat=n):
                assert average_precision(rel) == pytest.approx(brute_ap(rel), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 1), min_size=1, max_size=40))
    def test_bounds(self, rel):
        ap = average_precision(rel)
        assert 0.0 <= ap <= 1.0
        if any(rel):
            assert ap > 0


class TestCosine:
    def test_values(self):
        assert cosine_sim([1, 0], [0, 1]) == 0.0
        assert cosine_sim([1, 2], [2, 4]) == pytest.approx(1.0, abs=1e-15)
        assert cosine_sim([1, 2], [-1, -2]) == pytest.approx(-1.0, abs=1e-15)

    def test_zero_vector(self):
        assert cosine_sim([0, 0], [1, 1]) == 0.0

    def test_mismatch(self):
        with pytest.raises(RetrievalError):
            cosine_sim([1, 2], [1, 2, 3])


class TestRanking:
    def test_ties_by_index(self):
        q = np.array([[1.0, 0.0]])
        t = np.array([[1.0, 1.0], [2.0, 0.0], [1.0, 1.0], [3.0, 0.0]])
        np.testing.assert_array_equal(rank_targets(q, t)[0], [1, 3, 0, 2])

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        q, t = rng.normal(size=(4, 6)), rng.normal(size=(9, 6))
        np.testing.assert_array_equal(rank_targets(q, t), rank_targets(q * 3.7, t * 0.01))


class TestCrossModal:
    def test_one_hot_perfect(self):
        eye = np.eye(3)
        ft = table({"a": eye, "b": eye * 2}, {"a": [0, 1, 2], "b": [0, 1, 2]})
        rep = cross_modal_map(ft)
        assert rep.map["a"]["b"] == 100.0 and rep.map["b"]["a"] == 100.0
        assert rep.mean == 100.0

    def test_hand_computed(self):
        # query a0 ranks b targets [b0 (label 0), b1 (label 1), b2 (label 0)] -> AP 5/6
        ft = table({"a": [[1.0, 0.0]], "b": [[1.0, 0.0], [1.0, 0.5], [1.0, 1.0]]},
                   {"a": [0], "b": [0, 1, 0]})
        assert cross_modal_map(ft).map["a"]["b"] == pytest.approx(100 * 5 / 6, abs=1e-12)

    def test_mean_is_off_diagonal(self):
        rng = np.random.default_rng(1)
        ft = table({m: rng.normal(size=(6, 3)) for m in "abc"}, {m: [0, 1, 2] * 2 for m in "abc"})
        rep = cross_modal_map(ft)
        vals = [rep.map[q][t] for q in "abc" for t in "abc" if q != t]
        assert len(vals) == 6
        assert rep.mean == pytest.approx(np.mean(vals), abs=1e-12)
        assert rep.query_counts["a"]["b"] == 6

    def test_sampled_deterministic(self):
        rng = np.random.default_rng(2)
        ft = table({m: rng.normal(size=(10, 3)) for m in "ab"}, {m: np.arange(10) % 3 for m in "ab"})
        a, b = cross_modal_map(ft, 25, seed=4), cross_modal_map(ft, 25, seed=4)
        assert a.map == b.map and a.query_counts["a"]["b"] == 25

    def test_single_modality(self):
        ft = table({"a": np.eye(2)}, {"a": [0, 1]})
        with pytest.raises(RetrievalError):
            cross_modal_map(ft)


class TestWithinModal:
    def test_self_excluded(self):
        # each row's only match is itself, so within-modal AP is 0 once it is excluded
        ft = table({"a": np.eye(3)}, {"a": [0, 1, 2]})
        assert within_modal_map(ft)["a"] == 0.0

    def test_pairs(self):
        ft = table({"a": [[1, 0], [1, 0.1], [0, 1], [0.1, 1]]}, {"a": [0, 0, 1, 1]})
        assert within_modal_map(ft)["a"] == 100.0


def test_chance_map():
    # 100 targets, 10 relevant: random-ranking mAP is about 13.8
    v = chance_map(100, 10, trials=4000, seed=0)
    assert abs(v - 13.8) < 3.0


def test_chance_map_matches_random_features():
    rng = np.random.default_rng(3)
    labels = np.repeat(np.arange(10), 10)
    ft = table({"a": rng.normal(size=(100, 16)), "b": rng.normal(size=(100, 16))}, {"a": labels, "b": labels})
    assert abs(cross_modal_map(ft).mean - chance_map(100, 10, 2000)) < 3.0
