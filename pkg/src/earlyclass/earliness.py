"""Stopping-time distribution, earliness-reward loss and stop sampling.

The stopping head emits ``p_t``, the probability of halting at step ``t`` given
that the model has not halted yet. The probability of halting exactly at ``t``
is ``P(t) = p_t * prod_{tau < t} (1 - p_tau)``; forcing the last ``p`` to one
makes ``P`` a proper distribution over ``0..T-1``. Training minimizes the
``P``-weighted per-step loss

    L_t = alpha * CE_t - (1 - alpha) * yhat+_t * (1 - t / T)

so gradients reach the stopping head through ``P``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Value
from .model import BatchTrace, PredictionTrace

EARLY_REWARD = "early_reward"
CROSS_ENTROPY = "cross_entropy_baseline"
LOSS_MODES = (EARLY_REWARD, CROSS_ENTROPY)


class TraceContractError(ValueError):
    """A stop-probability vector violates the terminal-forcing contract."""


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.6
    mode: str = EARLY_REWARD

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.mode not in LOSS_MODES:
            raise ValueError(f"loss mode must be one of {LOSS_MODES}, got {self.mode!r}")


@dataclass
class StopDecision:
    t_stop: int
    label: int
    trace: PredictionTrace | None = None


def _check_probs(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise TraceContractError(f"expected a non-empty vector of stop probabilities, got shape {p.shape}")
    if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
        raise TraceContractError("stop probabilities must lie in [0, 1]")
    return p


def stopping_distribution(p) -> np.ndarray:
    """P(t) for t = 0..T-1 from stop probabilities whose last entry is 1."""
    p = _check_probs(p)
    if p[-1] != 1.0:
        raise TraceContractError(f"last stop probability must be 1 (got {p[-1]!r}); P would not normalize")
    P = np.empty_like(p)
    survival = 1.0
    for t, pt in enumerate(p):
        P[t] = pt * survival
        survival *= 1.0 - pt
    return P


def stopping_distribution_values(stops: Sequence[Value]) -> list[Value]:
    """Differentiable P(t) for a batch; ``stops`` holds T vectors of shape (B,)."""
    P = []
    survival: Value | float = 1.0
    last = len(stops) - 1
    for t, pt in enumerate(stops):
        P.append(dc.mul(pt, survival) if isinstance(survival, Value) else pt)
        if t < last:
            keep = dc.sub(1.0, pt)
            survival = dc.mul(survival, keep) if isinstance(survival, Value) else keep
    return P


def expected_stop_fraction(p) -> float:
    """E[t / (T-1)] under P; 1.0 for a length-one sequence."""
    P = stopping_distribution(p)
    T = len(P)
    if T == 1:
        return 1.0
    return float(np.dot(P, np.arange(T)) / (T - 1))


def classification_loss(yhat, y: int) -> float:
    """-log of the clamped probability of class ``y``."""
    yhat = np.asarray(yhat, dtype=np.float64)
    if not 0 <= y < yhat.shape[-1]:
        raise IndexError(f"class index {y} out of range [0, {yhat.shape[-1]})")
    return float(-np.log(np.clip(yhat[y], *dc.LOG_CLAMP)))


def earliness_reward(t, T: int, y_plus):
    return y_plus * (1.0 - t / T)


def step_loss(yhat, y, t: int, T: int, cfg: LossConfig) -> Value:
    """alpha * CE - (1 - alpha) * reward at step ``t`` (vector over a batch)."""
    if cfg.mode != EARLY_REWARD:
        raise ValueError("step_loss is only defined for the early_reward mode")
    y_plus = dc.pick(yhat, y)
    ce = dc.neg(dc.safe_log(y_plus))
    reward = dc.scale(y_plus, 1.0 - t / T)
    return dc.sub(dc.scale(ce, cfg.alpha), dc.scale(reward, 1.0 - cfg.alpha))


def _as_batch_trace(trace) -> BatchTrace:
    if isinstance(trace, BatchTrace):
        return trace
    if isinstance(trace, PredictionTrace):
        T = len(trace)
        return BatchTrace(
            [Value(trace.class_scores[t][None, :]) for t in range(T)],
            [Value(trace.stop_probs[t : t + 1]) for t in range(T)],
        )
    raise TypeError(f"expected a BatchTrace or PredictionTrace, got {type(trace).__name__}")


def per_sample_loss(trace, y, cfg: LossConfig) -> Value:
    """Loss of every sequence in the batch, shape (B,)."""
    trace = _as_batch_trace(trace)
    y = np.atleast_1d(np.asarray(y, dtype=np.intp))
    T = trace.length
    if T == 0 or len(trace.scores) != T:
        raise TraceContractError("trace must hold one score row and one stop probability per step")
    if cfg.mode == CROSS_ENTROPY:
        total = None
        for scores in trace.scores:
            ce = dc.neg(dc.safe_log(dc.pick(scores, y)))
            total = ce if total is None else dc.add(total, ce)
        return dc.scale(total, 1.0 / T)

    last = trace.stops[-1].data
    if not np.all(last == 1.0):
        raise TraceContractError("training trace must have its last stop probability forced to 1")
    P = stopping_distribution_values(trace.stops)
    total = None
    for t in range(T):
        term = dc.mul(P[t], step_loss(trace.scores[t], y, t, T, cfg))
        total = term if total is None else dc.add(total, term)
    return total


def sequence_loss(trace, y, cfg: LossConfig) -> Value:
    """Batch-mean training loss (a 0-d value)."""
    return dc.reduce("mean", per_sample_loss(trace, y, cfg))


def sample_stop(p, rng_seed=None, class_scores=None, rng: np.random.Generator | None = None) -> StopDecision:
    """Walk forward drawing Bernoulli(p_t); the first success is the stop.

    If no draw fires before the last step the stop is forced there. Pass
    ``class_scores`` (T, M) to get the predicted label at the stop.
    """
    p = _check_probs(p)
    if rng is None:
        rng = np.random.default_rng(rng_seed)
    draws = rng.random(len(p))
    fired = np.flatnonzero(draws[:-1] < p[:-1])
    t_stop = int(fired[0]) if fired.size else len(p) - 1
    label = -1
    trace = None
    if class_scores is not None:
        class_scores = np.asarray(class_scores)
        label = int(np.argmax(class_scores[t_stop]))
        trace = PredictionTrace(class_scores, p)
    return StopDecision(t_stop, label, trace)


def sample_stops(P_rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorized stop sampling for many sequences from their stop probabilities (N, T)."""
    p = np.asarray(P_rows, dtype=np.float64)
    N, T = p.shape
    draws = rng.random((N, T))
    fired = draws[:, :-1] < p[:, :-1]
    any_fired = fired.any(axis=1)
    first = np.where(any_fired, fired.argmax(axis=1), T - 1)
    return first.astype(np.intp)
