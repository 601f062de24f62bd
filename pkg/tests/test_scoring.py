"""Informativeness criteria: sum-based oracles, fast column-max scores,
cumulative accumulation, and magnitude segmentation."""

import numpy as np
import pytest

from cpvit.scoring import (
    CumulativeScores,
    accumulate,
    fast_scores,
    literal_head_deltas,
    oracle_head_informativeness,
    oracle_layer_patch_informativeness,
    oracle_patch_informativeness,
    segment_patches,
)
from cpvit.tensor import softmax_rows

from helpers import (
    naive_column_max_deltas,
    naive_head_informativeness,
    naive_layer_patch_informativeness,
    naive_patch_informativeness,
)


def random_attention(rng, heads, length):
    return softmax_rows(rng.normal(size=(heads, length, length)) * 2)


class TestOracles:
    def test_zero_tensor(self):
        a = np.zeros((2, 4, 4))
        assert oracle_patch_informativeness(a, 1, 0, 0.7, 1.3) == 0.0
        assert oracle_layer_patch_informativeness(a, 1, 0.7, 1.3) == 0.0
        assert oracle_head_informativeness(a, 1) == 0.0

    def test_row_stochastic_alpha_only(self):
        rng = np.random.default_rng(0)
        a = random_attention(rng, 2, 5)
        for p0 in range(5):
            val = oracle_patch_informativeness(a, p0, 0, alpha=1.0, beta=0.0)
            assert val == pytest.approx(1.0, abs=1e-12)

    def test_patch_matches_naive_loop(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(2, 4, 4))
        for p0 in range(4):
            for h in range(2):
                got = oracle_patch_informativeness(a, p0, h, 0.5, 2.0)
                want = naive_patch_informativeness(a, p0, h, 0.5, 2.0)
                assert got == pytest.approx(want, abs=1e-12)

    def test_layer_single_head_collapse(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(1, 5, 5))
        for p0 in range(5):
            assert oracle_layer_patch_informativeness(a, p0, 1.0, 1.0) == pytest.approx(
                oracle_patch_informativeness(a, p0, 0, 1.0, 1.0), abs=1e-12
            )

    def test_layer_identical_heads_linearity(self):
        rng = np.random.default_rng(3)
        one = rng.normal(size=(1, 4, 4))
        three = np.concatenate([one, one, one], axis=0)
        for p0 in range(4):
            assert oracle_layer_patch_informativeness(three, p0, 1.0, 1.0) == pytest.approx(
                3.0 * oracle_patch_informativeness(one, p0, 0, 1.0, 1.0), abs=1e-12
            )

    def test_layer_matches_naive_loop(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(4, 6, 6))
        for p0 in range(6):
            got = oracle_layer_patch_informativeness(a, p0, 0.5, 2.0)
            want = naive_layer_patch_informativeness(a, p0, 0.5, 2.0)
            assert got == pytest.approx(want, abs=1e-12)

    def test_head_row_stochastic_equals_length(self):
        rng = np.random.default_rng(5)
        a = random_attention(rng, 3, 6)
        for h in range(3):
            assert oracle_head_informativeness(a, h) == pytest.approx(6.0, abs=1e-9)

    def test_head_matches_naive_loop(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(2, 6, 6))
        for h in range(2):
            assert oracle_head_informativeness(a, h) == pytest.approx(
                naive_head_informativeness(a, h), abs=1e-12
            )

    def test_index_out_of_range(self):
        a = np.zeros((2, 3, 3))
        with pytest.raises(IndexError):
            oracle_patch_informativeness(a, 3, 0, 1, 1)
        with pytest.raises(IndexError):
            oracle_head_informativeness(a, 2)


class TestFastScores:
    def test_identity_attention_gives_ones(self):
        a = np.eye(4)[None, :, :]
        patch, head = fast_scores(a, np.ones(4), np.ones(1))
        assert np.array_equal(patch, np.ones(4))
        assert head[0] == pytest.approx(4.0)

    def test_uniform_attention_analytic(self):
        length = 5
        a = np.full((1, length, length), 1.0 / length)
        alive = np.ones(length)
        patch, head = fast_scores(a, alive, np.ones(1))
        assert np.allclose(patch, 1.0 / length, atol=1e-15)
        assert head[0] == pytest.approx(length * (1.0 / length), abs=1e-15)

    def test_uniform_with_dead_patches(self):
        length = 5
        a = np.full((1, length, length), 1.0 / length)
        alive = np.array([1, 1, 0, 1, 0])
        _, head = fast_scores(a, alive, np.ones(1))
        assert head[0] == pytest.approx(3 / length, abs=1e-15)

    def test_matches_brute_force_with_mask(self):
        rng = np.random.default_rng(7)
        a = softmax_rows(rng.normal(size=(2, 5, 5)))
        alive_p = np.array([1, 1, 0, 1, 1])
        alive_h = np.array([1, 1])
        a[:, :, 2] = 0.0  # pruned column, as the engine would produce
        patch, head = fast_scores(a, alive_p, alive_h)
        want_p, want_h = naive_column_max_deltas(a, alive_p, alive_h)
        assert np.allclose(patch, want_p, atol=1e-12)
        assert np.allclose(head, want_h, atol=1e-12)
        assert patch[2] == 0.0

    def test_deltas_bounded_by_head_count(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            heads = rng.integers(1, 5)
            length = rng.integers(2, 8)
            a = softmax_rows(rng.normal(size=(heads, length, length)) * 3)
            patch, _ = fast_scores(a, np.ones(length), np.ones(heads))
            assert (patch >= 0).all()
            assert (patch <= heads + 1e-12).all()

    def test_crafted_dominance_agreement(self):
        # one column receives >= 0.9 in every row of every head: both the
        # sum-based oracle and the fast criterion must rank it first
        rng = np.random.default_rng(9)
        heads, length = 2, 6
        for trial in range(25):
            c = int(rng.integers(0, length))
            a = np.zeros((heads, length, length))
            for h in range(heads):
                for i in range(length):
                    rest = rng.random(length - 1)
                    rest = rest / rest.sum() * 0.1
                    a[h, i, c] = 0.9
                    a[h, i, [j for j in range(length) if j != c]] = rest
            oracle = [
                oracle_layer_patch_informativeness(a, p, 1.0, 1.0)
                for p in range(length)
            ]
            fast, _ = fast_scores(a, np.ones(length), np.ones(heads))
            assert int(np.argmax(oracle)) == c
            assert int(np.argmax(fast)) == c


class TestAccumulate:
    def test_zero_deltas_noop(self):
        scores = CumulativeScores.zeros(4, 2)
        after = accumulate(scores, np.zeros(4), np.zeros(2))
        assert np.array_equal(after.patch_scores, scores.patch_scores)
        assert after.layers_accumulated == 1

    def test_additivity(self):
        rng = np.random.default_rng(10)
        d1p, d1h = rng.random(4), rng.random(2)
        d2p, d2h = rng.random(4), rng.random(2)
        scores = CumulativeScores.zeros(4, 2)
        two_step = accumulate(accumulate(scores, d1p, d1h), d2p, d2h)
        one_step = accumulate(scores, d1p + d2p, d1h + d2h)
        assert np.allclose(two_step.patch_scores, one_step.patch_scores, atol=1e-12)
        assert np.allclose(two_step.head_scores, one_step.head_scores, atol=1e-12)

    def test_frozen_entries_unchanged(self):
        scores = CumulativeScores(np.array([1.0, 2.0, 3.0]), np.array([4.0]), 1)
        after = accumulate(
            scores, np.array([0.5, 0.5, 0.5]), np.array([0.5]),
            alive_patches=np.array([1, 0, 1]), alive_heads=np.array([1]),
        )
        assert after.patch_scores[1] == 2.0
        assert after.patch_scores[0] == 1.5

    def test_monotone_nondecreasing(self):
        rng = np.random.default_rng(11)
        scores = CumulativeScores.zeros(5, 2)
        for _ in range(10):
            before = scores.patch_scores.copy()
            scores = accumulate(scores, rng.random(5), rng.random(2))
            assert (scores.patch_scores >= before).all()

    def test_negative_deltas_rejected(self):
        with pytest.raises(ValueError):
            accumulate(CumulativeScores.zeros(2, 1), np.array([-1.0, 0.0]), np.zeros(1))


class TestSegmentPatches:
    def test_three_singletons_ascending(self):
        a = np.zeros((1, 3, 3))
        a[0, :, 0] = 0.5
        a[0, :, 1] = 0.1
        a[0, :, 2] = 0.9
        segments = segment_patches(a, 3)
        assert segments == [[1], [0], [2]]

    def test_uniform_tie_break_by_index(self):
        length = 9
        a = np.full((2, length, length), 1.0 / length)
        segments = segment_patches(a, 3)
        assert segments == [[0, 1, 2], [3, 4, 5], [6, 7, 8]]

    def test_remainder_goes_to_highest_segments(self):
        length = 10
        a = np.full((1, length, length), 1.0 / length)
        segments = segment_patches(a, 3)
        assert [len(s) for s in segments] == [3, 3, 4]

    def test_partition_property(self):
        rng = np.random.default_rng(12)
        a = softmax_rows(rng.normal(size=(2, 9, 9)) * 2)
        segments = segment_patches(a, 3)
        flat = sorted(p for seg in segments for p in seg)
        assert flat == list(range(9))
        for i, s1 in enumerate(segments):
            for s2 in segments[i + 1 :]:
                assert not set(s1) & set(s2)

    def test_rejects_too_few_patches(self):
        with pytest.raises(ValueError):
            segment_patches(np.zeros((1, 2, 2)), 3)


class TestLiteralHeadDeltas:
    def test_running_total_reading(self):
        a = np.zeros((2, 3, 3))
        a[0] = np.eye(3)          # column maxima: [1, 1, 1]
        a[1] = np.eye(3) * 0.5    # column maxima: [.5, .5, .5]
        start = np.array([1.0, 0.0, 0.0])
        deltas = literal_head_deltas(a, np.ones(3), np.ones(2), start)
        # head 0: sum(start + [1,1,1]) = 4; head 1: sum(prev + [.5,.5,.5]) = 5.5
        assert deltas[0] == pytest.approx(4.0)
        assert deltas[1] == pytest.approx(5.5)
