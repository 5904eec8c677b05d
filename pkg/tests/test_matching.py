"""Assignment and loss: overlap math, Hungarian vs brute force, fixtures."""

import itertools
import math

import numpy as np
import pytest
from scipy.special import expit

import apf.matching as mt
from apf.errors import MatchingError
from apf.gradcheck import suite_matching
from apf.tensor import Tensor


def brute_force_assignment(cost: np.ndarray) -> float:
    """Minimum total cost over all ways to give each row a distinct column."""
    n, m = cost.shape
    best = math.inf
    for cols in itertools.permutations(range(m), n):
        best = min(best, sum(cost[i, j] for i, j in enumerate(cols)))
    return best


class TestTiou:
    def test_identical_is_one(self):
        np.testing.assert_allclose(mt.tiou_pairwise([[0.2, 0.6]], [[0.2, 0.6]]), [[1.0]])

    def test_disjoint_is_zero(self):
        np.testing.assert_allclose(mt.tiou_pairwise([[0.0, 0.2]], [[0.5, 0.9]]), [[0.0]])

    def test_half_overlap(self):
        # [0, 2] vs [1, 3]: intersection 1, union 3
        np.testing.assert_allclose(mt.tiou_pairwise([[0, 2]], [[1, 3]]), [[1 / 3]])

    def test_pairwise_shape(self):
        out = mt.tiou_pairwise(np.zeros((4, 2)), np.ones((3, 2)))
        assert out.shape == (4, 3)


class TestDiou:
    def test_identical_is_one(self):
        np.testing.assert_allclose(mt.diou_pairwise([[0.1, 0.5]], [[0.1, 0.5]]), [[1.0]])

    def test_separated_goes_negative(self):
        # no overlap, centers 0.1 and 0.8, enclosing span [0, 0.9]
        got = mt.diou_pairwise([[0.0, 0.2]], [[0.7, 0.9]])
        np.testing.assert_allclose(got, [[-(0.7**2) / (0.9**2)]], atol=1e-12)

    def test_fixture_values(self):
        # overlap case: inter 0.2, union 0.4, shared center
        np.testing.assert_allclose(mt.diou_pairwise([[0.3, 0.5]], [[0.2, 0.6]]), [[0.5]], atol=1e-15)
        # disjoint case: centers 0.8 vs 0.4, span 0.7
        np.testing.assert_allclose(
            mt.diou_pairwise([[0.7, 0.9]], [[0.2, 0.6]]), [[-0.16 / 0.49]], atol=1e-15
        )

    def test_bounded_above_by_tiou(self):
        rng = np.random.default_rng(0)
        a = np.sort(rng.random((20, 2)), axis=1)
        b = np.sort(rng.random((20, 2)), axis=1)
        assert np.all(mt.diou_pairwise(a, b) <= mt.tiou_pairwise(a, b) + 1e-12)


class TestHungarian:
    @pytest.mark.parametrize("seed", range(40))
    def test_matches_brute_force_cost(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 7))
        m = int(rng.integers(n, 7))
        cost = rng.standard_normal((n, m)) * rng.choice([0.1, 1.0, 10.0])
        cols = mt.hungarian(cost)
        assert len(set(cols.tolist())) == n
        total = cost[np.arange(n), cols].sum()
        assert total == pytest.approx(brute_force_assignment(cost), abs=1e-9)

    def test_integer_costs_tie_heavy(self):
        rng = np.random.default_rng(99)
        for _ in range(50):
            cost = rng.integers(0, 3, size=(5, 6)).astype(float)
            cols = mt.hungarian(cost)
            total = cost[np.arange(5), cols].sum()
            assert total == brute_force_assignment(cost)

    def test_constant_matrix_is_deterministic_identity(self):
        cols = mt.hungarian(np.zeros((4, 4)))
        np.testing.assert_array_equal(cols, [0, 1, 2, 3])

    def test_repeat_runs_identical(self):
        cost = np.random.default_rng(5).integers(0, 2, size=(6, 6)).astype(float)
        first = mt.hungarian(cost)
        for _ in range(5):
            np.testing.assert_array_equal(mt.hungarian(cost), first)

    def test_rejects_more_rows_than_columns(self):
        with pytest.raises(MatchingError):
            mt.hungarian(np.zeros((3, 2)))

    def test_empty(self):
        assert mt.hungarian(np.zeros((0, 4))).size == 0


FIXTURE = dict(
    logits=np.zeros((2, 2)),
    segments=np.array([[0.3, 0.5], [0.7, 0.9]]),
    gt_segments=np.array([[0.2, 0.6]]),
    gt_labels=np.array([0]),
)


class TestCostMatrix:
    def test_hand_computed_fixture(self):
        cost = mt.matching_cost(
            FIXTURE["logits"], FIXTURE["segments"], FIXTURE["gt_segments"], FIXTURE["gt_labels"]
        )
        # query 0: -0.5 + 0.2 + (1 - 0.5); query 1: -0.5 + 0.8 + (1 + 16/49)
        np.testing.assert_allclose(cost[:, 0], [0.2, 0.3 + 65.0 / 49.0], atol=1e-12)

    def test_prefers_overlapping_query(self):
        pred_idx, gt_idx = mt.match(
            Tensor(FIXTURE["logits"]),
            Tensor(FIXTURE["segments"]),
            FIXTURE["gt_segments"],
            FIXTURE["gt_labels"],
        )
        np.testing.assert_array_equal(pred_idx, [0])
        np.testing.assert_array_equal(gt_idx, [0])


class TestFocalLoss:
    def test_matches_naive_formula(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.uniform(-3, 3, (5, 4)), requires_grad=True)
        pred_idx = np.array([1, 3])
        labels = np.array([0, 2])
        got = mt.focal_loss(logits, pred_idx, labels).item()
        p = expit(logits.data)
        y = np.zeros((5, 4))
        y[pred_idx, labels] = 1
        naive = -(
            y * 0.25 * (1 - p) ** 2 * np.log(p) + (1 - y) * 0.75 * p**2 * np.log(1 - p)
        ).sum() / 5
        assert got == pytest.approx(naive, abs=1e-10)

    def test_stable_at_extreme_logits(self):
        logits = Tensor(np.array([[50.0, -50.0], [30.0, -30.0]]))
        out = mt.focal_loss(logits, np.array([0]), np.array([1])).item()
        assert np.isfinite(out) and out > 0

    def test_all_negative_when_nothing_matched(self):
        logits = Tensor(np.zeros((3, 2)))
        got = mt.focal_loss(logits, np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)).item()
        # six cells, each 0.75 * 0.25 * ln 2, averaged over three queries
        assert got == pytest.approx(6 * 0.75 * 0.25 * math.log(2) / 3, abs=1e-12)


class TestDetectionLoss:
    def test_frozen_fixture_terms(self):
        out = mt.detection_loss(
            Tensor(FIXTURE["logits"], requires_grad=True),
            Tensor(FIXTURE["segments"], requires_grad=True),
            FIXTURE["gt_segments"],
            FIXTURE["gt_labels"],
        )
        assert out.cls == pytest.approx(0.3125 * math.log(2), abs=1e-12)
        assert out.l1 == pytest.approx(0.2, abs=1e-12)
        assert out.diou == pytest.approx(0.5, abs=1e-12)
        assert out.total.item() == pytest.approx(0.3125 * math.log(2) + 0.7, abs=1e-12)
        np.testing.assert_array_equal(out.pred_idx, [0])

    def test_zero_ground_truth_is_classification_only(self):
        out = mt.detection_loss(
            Tensor(np.zeros((3, 2)), requires_grad=True),
            Tensor(np.tile([0.4, 0.6], (3, 1)), requires_grad=True),
            np.zeros((0, 2)),
            np.zeros(0, dtype=np.intp),
        )
        assert out.l1 == 0.0 and out.diou == 0.0
        assert out.total.item() == pytest.approx(out.cls, abs=1e-15)
        assert out.pred_idx.size == 0

    def test_too_many_segments_rejected(self):
        with pytest.raises(MatchingError):
            mt.detection_loss(
                Tensor(np.zeros((2, 2))),
                Tensor(np.tile([0.4, 0.6], (2, 1))),
                np.tile([0.1, 0.9], (3, 1)),
                np.array([0, 1, 0]),
            )

    def test_lambda_scales_regression_only(self):
        heavy = mt.LossWeights(reg_lambda=3.0)
        base = mt.detection_loss(
            Tensor(FIXTURE["logits"]), Tensor(FIXTURE["segments"]),
            FIXTURE["gt_segments"], FIXTURE["gt_labels"],
        )
        scaled = mt.detection_loss(
            Tensor(FIXTURE["logits"]), Tensor(FIXTURE["segments"]),
            FIXTURE["gt_segments"], FIXTURE["gt_labels"], heavy,
        )
        assert scaled.cls == pytest.approx(base.cls, abs=1e-15)
        assert scaled.l1 == pytest.approx(3 * base.l1, abs=1e-12)
        assert scaled.diou == pytest.approx(3 * base.diou, abs=1e-12)


class TestGradients:
    def test_loss_gradcheck(self):
        for result in suite_matching(seeds=3):
            assert result.ok, f"{result.name} worst rel err {result.worst:.3e}"

    def test_no_gradient_reaches_unmatched_segments(self):
        logits = Tensor(FIXTURE["logits"], requires_grad=True)
        segments = Tensor(FIXTURE["segments"], requires_grad=True)
        out = mt.detection_loss(logits, segments, FIXTURE["gt_segments"], FIXTURE["gt_labels"])
        import apf.tensor as tc

        tc.backward(out.total)
        # query 1 is unmatched; only the focal term touches it, via logits
        np.testing.assert_array_equal(segments.grad[1], [0.0, 0.0])
        assert np.any(segments.grad[0] != 0)
