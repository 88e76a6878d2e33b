import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcbdr import gdr
from fedcbdr.gdr import (DegenerateFeaturesError, IndexTable, LeverageProfile,
                         NormMode, ReplaySelection, Selected,
                         UnsupportedDecodeError, aggregate_and_factor,
                         build_distribution, class_quotas, decode_selection,
                         leverage_scores, mask_local_features,
                         stratified_sample)
from fedcbdr.linalg import MaskKind, random_orthogonal, singular_values, thin_svd
from oracles import projector_leverage


def table_for(n, client=0, labels=None):
    labels = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels)
    return IndexTable(np.full(n, client), np.arange(n), labels, 0)


def profile(scores, classes=None, clients=None):
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    return LeverageProfile(np.zeros(n, np.int64) if clients is None else np.asarray(clients),
                           np.arange(n), np.zeros(n, np.int64) if classes is None else np.asarray(classes),
                           scores, rank=1)


class TestMasking:
    def test_identity_masks(self, rng):
        # a single row leaves the permutation mask no choice but the identity
        X = rng.standard_normal((1, 3))
        q = random_orthogonal(3, 0, "Permutation")
        eye = type(q)(np.eye(3), MaskKind.PERMUTATION, np.arange(3))
        block = mask_local_features(X, 0, eye, MaskKind.PERMUTATION)
        np.testing.assert_array_equal(block.masked, X)
        assert block.row_map.tolist() == [0]

    def test_general_mask_has_no_row_map(self, rng):
        block = mask_local_features(rng.standard_normal((4, 3)), 0, random_orthogonal(3, 1), MaskKind.GENERAL)
        assert block.row_map is None

    def test_permutation_keeps_rows(self, rng):
        X = rng.standard_normal((6, 3))
        q = random_orthogonal(3, 9)
        block = mask_local_features(X, 4, q, MaskKind.PERMUTATION, labels=np.arange(6))
        rows = sorted(map(tuple, np.round(block.masked, 12)))
        assert rows == sorted(map(tuple, np.round(X @ q.inner, 12)))
        np.testing.assert_array_equal(block.masked, (X @ q.inner)[block.row_map])
        np.testing.assert_array_equal(block.labels, block.row_map)

    @pytest.mark.parametrize("kind", list(MaskKind))
    def test_spectrum(self, rng, kind):
        X = rng.standard_normal((20, 5))
        block = mask_local_features(X, 1, random_orthogonal(5, 2), kind)
        np.testing.assert_allclose(singular_values(block.masked), singular_values(X), rtol=1e-8)


class TestAggregate:
    def test_single_block(self, rng):
        X = rng.standard_normal((5, 3))
        b = gdr.MaskedBlock(0, 0, X, np.zeros(5, np.int64), np.arange(5))
        f, _ = aggregate_and_factor([b])
        np.testing.assert_allclose(f.S, thin_svd(X).S)

    def test_bookkeeping(self, rng):
        a = gdr.MaskedBlock(3, 1, rng.standard_normal((3, 2)), np.zeros(3, np.int64))
        b = gdr.MaskedBlock(7, 1, rng.standard_normal((5, 2)), np.ones(5, np.int64))
        f, t = aggregate_and_factor([b, a])
        assert f.U.shape[0] == 8
        assert t.client_ids.tolist() == [3] * 3 + [7] * 5
        assert t.rows.tolist() == [0, 1, 2, 0, 1, 2, 3, 4]

    def test_masked_spectrum_equals_unmasked(self, rng):
        for trial in range(10):
            q = random_orthogonal(4, trial)
            Xs = [rng.standard_normal((int(rng.integers(1, 9)), 4)) for _ in range(3)]
            blocks = [mask_local_features(X, 10 * trial + k, q, MaskKind.GENERAL, client_id=k)
                      for k, X in enumerate(Xs)]
            f, _ = aggregate_and_factor(blocks)
            np.testing.assert_allclose(f.S, singular_values(np.vstack(Xs)), rtol=1e-8, atol=1e-12)

    def test_mixed_inputs(self, rng):
        a = gdr.MaskedBlock(0, 0, rng.standard_normal((3, 2)), np.zeros(3, np.int64))
        with pytest.raises(gdr.GdrError):
            aggregate_and_factor([a, gdr.MaskedBlock(1, 0, rng.standard_normal((3, 3)), np.zeros(3, np.int64))])
        with pytest.raises(gdr.GdrError):
            aggregate_and_factor([a, gdr.MaskedBlock(1, 1, rng.standard_normal((3, 2)), np.zeros(3, np.int64))])


class TestLeverage:
    def test_identity(self):
        p = leverage_scores(thin_svd(np.eye(3)), table_for(3))
        np.testing.assert_allclose(p.scores, 1.0)

    def test_rank_deficient_example(self):
        X = [[1, 0], [2, 0], [2, 0]]
        p = leverage_scores(thin_svd(X), table_for(3))
        np.testing.assert_allclose(p.scores, [1 / 9, 4 / 9, 4 / 9], atol=1e-14)
        np.testing.assert_allclose(projector_leverage(X), [1 / 9, 4 / 9, 4 / 9], atol=1e-14)
        assert p.rank == 1

    def test_untruncated_keeps_all_columns(self):
        p = leverage_scores(thin_svd([[1, 0], [2, 0], [2, 0]]), table_for(3), truncate_rank=False)
        assert p.rank == 2 and p.scores.sum() == pytest.approx(2.0)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(1, 40), d=st.integers(1, 8), seed=st.integers(0, 2**31))
    def test_matches_oracle_and_sums_to_rank(self, n, d, seed):
        X = np.random.default_rng(seed).standard_normal((n, d))
        p = leverage_scores(thin_svd(X), table_for(n))
        np.testing.assert_allclose(p.scores, projector_leverage(X), atol=1e-8)
        assert abs(p.scores.sum() - min(n, d)) <= 1e-6
        assert (p.scores >= 0).all()


class TestDistribution:
    def test_global(self):
        np.testing.assert_allclose(build_distribution(profile([1, 3])).probs, [0.25, 0.75])

    def test_per_class(self):
        p = build_distribution(profile([1, 1, 2, 2], classes=[0, 0, 1, 1]), NormMode.PER_CLASS)
        np.testing.assert_allclose(p.probs, 0.5)
        np.testing.assert_allclose(p.global_probs, [1 / 6, 1 / 6, 1 / 3, 1 / 3])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(0.01, 10), min_size=1, max_size=30), st.sampled_from(list(NormMode)))
    def test_group_sums(self, scores, mode):
        classes = np.arange(len(scores)) % 3
        p = build_distribution(profile(scores, classes), mode)
        groups = classes if mode is NormMode.PER_CLASS else np.zeros_like(classes)
        for g in np.unique(groups):
            assert abs(p.probs[groups == g].sum() - 1) <= 1e-9

    def test_all_zero_group(self):
        with pytest.raises(DegenerateFeaturesError):
            build_distribution(profile([0, 0, 1], classes=[0, 0, 1]), NormMode.PER_CLASS)


class TestQuotas:
    def test_even(self):
        assert class_quotas(10, {0: 10, 1: 10}, {0: 1, 1: 1}) == {0: 5, 1: 5}

    def test_surplus(self):
        assert class_quotas(10, {0: 3, 1: 100}, {0: 1, 1: 1}) == {0: 3, 1: 7}

    def test_remainder_goes_to_heaviest(self):
        assert class_quotas(7, {0: 9, 1: 9, 2: 9}, {0: 1.0, 1: 3.0, 2: 2.0}) == {0: 2, 1: 3, 2: 2}

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 60), st.lists(st.integers(0, 30), min_size=1, max_size=6))
    def test_properties(self, budget, avail):
        av = dict(enumerate(avail))
        q = class_quotas(budget, av, {c: float(c) for c in av})
        assert sum(q.values()) == min(budget, sum(avail))
        assert all(0 <= q[c] <= av[c] for c in av)
        free = [q[c] for c in av if q[c] < av[c]]
        if free:
            # classes that still have spare samples are within one of each other and of the top
            assert max(q.values()) - min(free) <= 1


class TestStratifiedSample:
    def test_balanced(self, rng):
        p = build_distribution(profile(rng.random(20) + 0.1, np.repeat([0, 1], 10)), "PerClass")
        sel = stratified_sample(p, 10, seed=1)
        assert Counter(e.class_id for e in sel.entries) == {0: 5, 1: 5}

    def test_small_class(self, rng):
        p = profile(rng.random(103) + 0.1, np.r_[np.zeros(3, int), np.ones(100, int)])
        sel = stratified_sample(build_distribution(p, "PerClass"), 10, 2)
        assert Counter(e.class_id for e in sel.entries) == {0: 3, 1: 7}

    def test_weight_formula(self):
        p = build_distribution(profile([1, 1, 1, 1], [0, 1, 2, 3]), "PerClass")
        sel = stratified_sample(p, 4, 0)
        assert all(e.weight == pytest.approx(1.0) for e in sel.entries)

    def test_no_duplicates_and_size(self, rng):
        p = build_distribution(profile(rng.random(30) + 0.01, rng.integers(0, 4, 30)), "PerClass")
        for budget in (0, 5, 30, 100):
            sel = stratified_sample(p, budget, budget)
            keys = [(e.client_id, e.row) for e in sel.entries]
            assert len(keys) == len(set(keys)) == min(budget, 30)

    def test_deterministic(self, rng):
        p = build_distribution(profile(rng.random(30) + 0.01, rng.integers(0, 3, 30)), "PerClass")
        assert stratified_sample(p, 9, 4).entries == stratified_sample(p, 9, 4).entries

    def test_zero_scores_never_selected(self):
        p = build_distribution(profile([0, 1, 1, 0, 2, 2], [0, 0, 0, 1, 1, 1]), "PerClass")
        sel = stratified_sample(p, 6, 0)
        assert sorted(e.row for e in sel.entries) == [1, 2, 4, 5]

    def test_within_class_follows_leverage(self):
        # one heavy row among light ones should be drawn far more often than uniform
        scores = np.r_[10.0, np.full(9, 0.1)]
        p = build_distribution(profile(scores), "PerClass")
        hits = sum(any(e.row == 0 for e in stratified_sample(p, 1, s).entries) for s in range(400))
        assert hits > 300

    def test_empty(self):
        with pytest.raises(gdr.GdrError):
            stratified_sample(profile([]), 3, 0)


class TestDecode:
    def sel(self, rows, client=0):
        return ReplaySelection(0, [Selected(client, r, 0, 1.0, 0.1, 1.0) for r in rows])

    def test_identity(self):
        assert decode_selection(self.sel([0, 3]), {0: np.arange(5)}) == {0: [0, 3]}

    def test_reverse(self):
        assert decode_selection(self.sel([0]), {0: np.arange(5)[::-1]}) == {0: [4]}

    def test_missing_row_map(self):
        with pytest.raises(UnsupportedDecodeError):
            decode_selection(self.sel([0]), {0: None})


def test_selection_jsonl(tmp_path):
    path = tmp_path / "s.jsonl"
    with path.open("w") as fh:
        gdr.write_selection_jsonl(fh, [{"task": 0, "client": 1, "local_index": 2, "class": 3,
                                        "score": 0.5, "probability": 0.1, "weight": 2.0}])
    rec = json.loads(path.read_text())
    assert set(rec) == {"task", "client", "local_index", "class", "score", "probability", "weight"}
