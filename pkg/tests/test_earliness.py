import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from earlyclass import diffcore as dc
from earlyclass.diffcore import Value
from earlyclass.earliness import (
    CROSS_ENTROPY,
    EARLY_REWARD,
    LossConfig,
    TraceContractError,
    classification_loss,
    earliness_reward,
    expected_stop_fraction,
    sample_stop,
    sample_stops,
    sequence_loss,
    step_loss,
    stopping_distribution,
)
from earlyclass.model import BatchTrace, PredictionTrace

stop_vectors = st.lists(st.floats(0.0, 1.0), min_size=0, max_size=40).map(lambda xs: np.array(xs + [1.0]))


def loss_at(y_plus, alpha, t, T):
    yhat = np.array([[y_plus, 1.0 - y_plus]])
    return step_loss(yhat, [0], t, T, LossConfig(alpha)).item()


class TestLossConfig:
    @pytest.mark.parametrize("alpha", [-0.1, 1.5])
    def test_alpha_range(self, alpha):
        with pytest.raises(ValueError):
            LossConfig(alpha)

    def test_mode(self):
        with pytest.raises(ValueError):
            LossConfig(0.5, "hinge")


class TestStoppingDistribution:
    def test_immediate(self):
        assert stopping_distribution([1.0, 0.3, 1.0]).tolist() == [1.0, 0.0, 0.0]

    def test_forced_terminal(self):
        assert stopping_distribution([0.0, 0.0, 1.0]).tolist() == [0.0, 0.0, 1.0]

    def test_halves(self):
        np.testing.assert_allclose(stopping_distribution([0.5, 0.5, 1.0]), [0.5, 0.25, 0.25])

    def test_unforced_terminal_rejected(self):
        with pytest.raises(TraceContractError):
            stopping_distribution([0.5, 0.5, 0.9])

    def test_out_of_range_rejected(self):
        with pytest.raises(TraceContractError):
            stopping_distribution([1.2, 1.0])

    @settings(max_examples=200)
    @given(stop_vectors)
    def test_sums_to_one(self, p):
        P = stopping_distribution(p)
        assert abs(P.sum() - 1.0) < 1e-6
        assert np.all(P >= 0)

    def test_differentiable_version_matches(self):
        from earlyclass.earliness import stopping_distribution_values

        rng = np.random.default_rng(0)
        p = rng.uniform(0, 1, (4, 6))
        p[:, -1] = 1.0
        P = stopping_distribution_values([Value(p[:, t]) for t in range(6)])
        for row in range(4):
            np.testing.assert_allclose([P[t].data[row] for t in range(6)], stopping_distribution(p[row]))


class TestClassificationLoss:
    def test_certain(self):
        assert classification_loss([0.0, 1.0], 1) == 0.0

    def test_half(self):
        assert classification_loss([0.5, 0.5], 0) == pytest.approx(0.6931, abs=1e-4)

    def test_zero_is_clamped(self):
        assert classification_loss([0.0, 1.0], 0) == pytest.approx(18.42, abs=0.01)

    def test_index_range(self):
        with pytest.raises(IndexError):
            classification_loss([0.5, 0.5], 2)


class TestEarlinessReward:
    def test_examples(self):
        assert earliness_reward(0, 10, 1.0) == 1.0
        assert earliness_reward(10, 10, 0.37) == 0.0
        assert earliness_reward(5, 10, 0.8) == pytest.approx(0.4)

    @given(st.floats(0.01, 1.0), st.integers(2, 100))
    def test_strictly_decreasing_in_time(self, y_plus, T):
        r = [earliness_reward(t, T, y_plus) for t in range(T)]
        assert all(a > b for a, b in zip(r, r[1:]))


class TestStepLoss:
    def test_alpha_one_is_cross_entropy(self):
        assert loss_at(0.3, 1.0, 4, 10) == pytest.approx(-math.log(0.3), rel=1e-15)

    def test_alpha_zero_is_negative_reward(self):
        assert loss_at(0.3, 0.0, 4, 10) == pytest.approx(-0.3 * 0.6, rel=1e-15)

    def test_mixed(self):
        assert loss_at(0.5, 0.6, 5, 10) == pytest.approx(0.3159, abs=5e-5)

    def test_rejects_baseline_mode(self):
        with pytest.raises(ValueError):
            step_loss(np.array([[1.0]]), [0], 0, 1, LossConfig(0.5, CROSS_ENTROPY))

    @settings(max_examples=100)
    @given(st.floats(0.0, 0.999), st.integers(1, 50), st.data())
    def test_nonincreasing_in_correct_score(self, alpha, T, data):
        t = data.draw(st.integers(0, T - 1))
        ys = sorted(data.draw(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=6)))
        losses = [loss_at(y, alpha, t, T) for y in ys]
        assert all(a >= b - 1e-12 for a, b in zip(losses, losses[1:]))


def spreadsheet_loss(p, yhat_plus, alpha):
    """Plain-float evaluation of the expected step loss for one sequence."""
    T = len(p)
    total, survive = 0.0, 1.0
    for t in range(T):
        weight = p[t] * survive
        survive *= 1.0 - p[t]
        ce = -math.log(max(yhat_plus[t], 1e-8))
        reward = yhat_plus[t] * (1.0 - t / T)
        total += weight * (alpha * ce - (1.0 - alpha) * reward)
    return total


def make_trace(scores, stops, requires_grad=False):
    return BatchTrace(
        [Value(s, requires_grad=requires_grad) for s in scores],
        [Value(p, requires_grad=requires_grad) for p in stops],
    )


class TestSequenceLoss:
    def test_handpicked_three_steps(self):
        scores = np.array([[0.2, 0.8], [0.7, 0.3], [0.9, 0.1]])
        p = np.array([0.3, 0.6, 1.0])
        trace = PredictionTrace(scores, p)
        got = sequence_loss(trace, 0, LossConfig(0.6)).item()
        # P = [0.3, 0.42, 0.28]
        expected = (
            0.3 * (0.6 * -math.log(0.2) - 0.4 * 0.2 * 1.0)
            + 0.42 * (0.6 * -math.log(0.7) - 0.4 * 0.7 * (2 / 3))
            + 0.28 * (0.6 * -math.log(0.9) - 0.4 * 0.9 * (1 / 3))
        )
        assert got == pytest.approx(expected, rel=1e-12)
        assert got == pytest.approx(spreadsheet_loss(p, scores[:, 0], 0.6), rel=1e-12)

    def test_one_hot_stop_equals_step_loss(self):
        scores = np.array([[0.2, 0.8], [0.7, 0.3], [0.9, 0.1]])
        trace = PredictionTrace(scores, np.array([0.0, 1.0, 1.0]))
        cfg = LossConfig(0.6)
        assert sequence_loss(trace, 0, cfg).item() == pytest.approx(
            step_loss(scores[1:2], [0], 1, 3, cfg).item(), rel=1e-15
        )

    def test_baseline_perfect_is_zero(self):
        trace = PredictionTrace(np.tile([1.0, 0.0], (5, 1)), np.array([0.1] * 4 + [1.0]))
        assert sequence_loss(trace, 0, LossConfig(0.6, CROSS_ENTROPY)).item() == 0.0

    def test_baseline_is_mean_cross_entropy(self):
        scores = np.array([[0.5, 0.5], [0.25, 0.75]])
        trace = PredictionTrace(scores, np.array([0.0, 1.0]))
        got = sequence_loss(trace, 0, LossConfig(0.6, CROSS_ENTROPY)).item()
        assert got == pytest.approx((math.log(2) + math.log(4)) / 2)

    def test_requires_forced_terminal(self):
        trace = PredictionTrace(np.tile([0.5, 0.5], (3, 1)), np.array([0.1, 0.1, 0.5]))
        with pytest.raises(TraceContractError):
            sequence_loss(trace, 0, LossConfig(0.6))

    def test_batch_is_mean_of_rows(self):
        rng = np.random.default_rng(1)
        B, T, M = 5, 7, 3
        scores = rng.dirichlet(np.ones(M), size=(T, B))
        stops = rng.uniform(0, 1, (T, B))
        stops[-1] = 1.0
        y = rng.integers(0, M, B)
        batch = sequence_loss(make_trace(scores, stops), y, LossConfig(0.4)).item()
        rows = [spreadsheet_loss(stops[:, b], scores[:, b, y[b]], 0.4) for b in range(B)]
        assert batch == pytest.approx(np.mean(rows), rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_alpha_one_has_no_reward_term(self, T, seed):
        rng = np.random.default_rng(seed)
        scores = rng.dirichlet(np.ones(3), size=T)
        p = rng.uniform(0, 1, T)
        p[-1] = 1.0
        got = sequence_loss(PredictionTrace(scores, p), 1, LossConfig(1.0)).item()
        P = stopping_distribution(p)
        expected = float(np.dot(P, -np.log(np.clip(scores[:, 1], 1e-8, 1))))
        assert got == pytest.approx(expected, rel=1e-12, abs=1e-14)

    def test_stop_head_gradient_nonzero_and_correct(self):
        rng = np.random.default_rng(2)
        B, T, M = 3, 5, 4
        scores = rng.dirichlet(np.ones(M), size=(T, B))
        stops = rng.uniform(0.05, 0.95, (T, B))
        stops[-1] = 1.0
        y = rng.integers(0, M, B)
        # only the non-terminal stops are free parameters
        free = [Value(stops[t], requires_grad=True) for t in range(T - 1)]
        score_vals = [Value(s) for s in scores]
        cfg = LossConfig(0.6)

        def f():
            return sequence_loss(BatchTrace(score_vals, free + [Value(stops[-1])]), y, cfg)

        report = dc.check_gradients(f, free, eps=1e-6, tol=1e-6)
        assert report.ok, report.worst()
        assert any(np.abs(v.grad).max() > 1e-3 for v in free)


class TestSampleStop:
    def test_immediate(self):
        assert sample_stop([1.0, 0.5, 1.0], rng_seed=3).t_stop == 0

    def test_terminal_only(self):
        assert sample_stop([0.0] * 9 + [1.0], rng_seed=3).t_stop == 9

    def test_never_fires_is_forced_to_end(self):
        # the last probability is ignored; the final step is always available
        assert sample_stop([0.0, 0.0, 0.0], rng_seed=0).t_stop == 2

    def test_label_and_determinism(self):
        scores = np.array([[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]])
        a = sample_stop([0.0, 1.0, 1.0], rng_seed=11, class_scores=scores)
        assert (a.t_stop, a.label) == (1, 1)
        p = np.array([0.3, 0.3, 0.3, 1.0])
        assert [sample_stop(p, rng_seed=s).t_stop for s in range(20)] == [
            sample_stop(p, rng_seed=s).t_stop for s in range(20)
        ]

    def test_monte_carlo_matches_distribution(self):
        p = np.array([0.5, 0.5, 1.0])
        rng = np.random.default_rng(12345)
        stops = [sample_stop(p, rng=rng).t_stop for _ in range(100_000)]
        freq = np.bincount(stops, minlength=3) / len(stops)
        assert np.abs(freq - [0.5, 0.25, 0.25]).max() < 0.01

    def test_vectorized_matches_distribution(self):
        p = np.array([0.1, 0.2, 0.05, 0.3, 1.0])
        stops = sample_stops(np.tile(p, (100_000, 1)), np.random.default_rng(5))
        freq = np.bincount(stops, minlength=5) / len(stops)
        assert np.abs(freq - stopping_distribution(p)).max() < 0.01


class TestExpectedStopFraction:
    def test_examples(self):
        assert expected_stop_fraction([1.0, 0.0, 1.0]) == 0.0
        assert expected_stop_fraction([0.0, 0.0, 0.0, 1.0]) == 1.0
        assert expected_stop_fraction([0.5, 0.5, 1.0]) == pytest.approx(0.375)
        assert expected_stop_fraction([1.0]) == 1.0

    @given(stop_vectors)
    def test_in_unit_interval(self, p):
        assert -1e-12 <= expected_stop_fraction(p) <= 1.0 + 1e-12


def test_mode_constants_are_distinct():
    assert EARLY_REWARD != CROSS_ENTROPY
