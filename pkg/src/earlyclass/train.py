"""Adam training loop with per-epoch temporal resubsampling and checkpoints.

All randomness is derived from ``(seed, epoch, ...)`` tuples rather than a
running generator, so a run resumed from a checkpoint after epoch ``k``
reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .data import DatasetSplit, TimeSeriesSample, fit_normalization, subsample_batch
from .earliness import CROSS_ENTROPY, LossConfig, per_sample_loss
from .model import (
    ModelConfig,
    ParameterSet,
    forward_batch,
    init_parameters,
    load_parameters,
    params_from_dict,
    params_to_dict,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "earlyclass-checkpoint"
CHECKPOINT_VERSION = 1
HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_accuracy", "val_mean_stop_fraction")
VAL_SEED = 7919


class TrainingError(RuntimeError):
    """Training cannot continue (non-finite loss or gradient)."""


class CheckpointError(ValueError):
    """Checkpoint file is unreadable, truncated or of another version."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 1024
    epochs: int = 30
    alpha: float = 0.6
    loss_mode: str = "early_reward"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seq_len: int = 70
    micro_batch: int = 256
    grad_clip: float | None = None
    init_from: str | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.micro_batch < 1 or self.seq_len < 1:
            raise ValueError("batch_size, micro_batch and seq_len must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ValueError("adam betas must lie in [0, 1) and eps must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")
        LossConfig(self.alpha, self.loss_mode)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.alpha, self.loss_mode)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    params: ParameterSet
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    best_params: ParameterSet | None = None
    best_epoch: int = -1
    best_val_accuracy: float = -math.inf

    @classmethod
    def fresh(cls, params: ParameterSet) -> "TrainState":
        return cls(
            params,
            {k: np.zeros_like(p.data) for k, p in params.arrays.items()},
            {k: np.zeros_like(p.data) for k, p in params.arrays.items()},
        )


def adam_step(
    state: TrainState,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> TrainState:
    """One bias-corrected Adam update, in place; returns ``state``."""
    for name, g in grads.items():
        if g.shape != state.params[name].shape:
            raise TrainingError(f"gradient for {name} has shape {g.shape}, parameter has {state.params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        state.params[name].data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm


def batch_gradients(
    params: ParameterSet,
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    X: np.ndarray,
    y: np.ndarray,
    micro_batch: int,
    dropout_seed: tuple,
    training: bool = True,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean batch loss and its gradient, accumulated over micro-batches."""
    params.zero_grad()
    n = len(y)
    total = 0.0
    for k, start in enumerate(range(0, n, micro_batch)):
        sl = slice(start, start + micro_batch)
        trace = forward_batch(params, model_cfg, X[sl], training=training, dropout_seed=(*dropout_seed, k))
        losses = per_sample_loss(trace, y[sl], loss_cfg)
        chunk_loss = dc.scale(dc.reduce("sum", losses), 1.0 / n)
        dc.backward(chunk_loss)
        total += chunk_loss.item()
    return total, {k: p.grad for k, p in params.arrays.items()}


def validation_metrics(
    params: ParameterSet,
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    samples: Sequence[TimeSeriesSample],
    seq_len: int,
    chunk: int = 512,
) -> tuple[float, float, float]:
    """(loss, accuracy, mean stop fraction) on a fixed subsample of ``samples``.

    Early-reward models stop at a seeded draw from their stop probabilities;
    the cross-entropy baseline is scored on the last step.
    """
    from .earliness import sample_stops

    if not samples:
        return math.nan, math.nan, math.nan
    X, _ = subsample_batch(samples, seq_len, VAL_SEED)
    y = np.array([s.label for s in samples])
    losses, scores, stops = [], [], []
    with dc.no_grad():
        for start in range(0, len(y), chunk):
            sl = slice(start, start + chunk)
            trace = forward_batch(params, model_cfg, X[sl])
            losses.append(per_sample_loss(trace, y[sl], loss_cfg).data)
            scores.append(np.stack([s.data for s in trace.scores], axis=1))
            stops.append(np.stack([p.data for p in trace.stops], axis=1))
    scores = np.concatenate(scores)
    stops = np.concatenate(stops)
    T = scores.shape[1]
    if loss_cfg.mode == CROSS_ENTROPY:
        t_stop = np.full(len(y), T - 1)
    else:
        t_stop = sample_stops(stops, np.random.default_rng(VAL_SEED))
    pred = scores[np.arange(len(y)), t_stop].argmax(axis=1)
    frac = t_stop / (T - 1) if T > 1 else np.ones(len(y))
    return float(np.concatenate(losses).mean()), float((pred == y).mean()), float(frac.mean())


def initial_state(model_cfg: ModelConfig, train_cfg: TrainConfig, train_samples: Sequence[TimeSeriesSample]) -> TrainState:
    if train_cfg.init_from:
        params, loaded_cfg = load_parameters(train_cfg.init_from)
        if loaded_cfg != model_cfg:
            raise ValueError(f"{train_cfg.init_from}: model config {loaded_cfg} differs from {model_cfg}")
    else:
        params = init_parameters(model_cfg, train_cfg.seed)
    params.set_normalization(*fit_normalization(train_samples))
    return TrainState.fresh(params)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    split: DatasetSplit,
    state: TrainState | None = None,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> tuple[ParameterSet, list[dict], TrainState]:
    """Train until ``train_cfg.epochs`` epochs are done.

    Returns the final parameters, the metric history and the final state (pass
    it back in to resume). The best-validation-accuracy parameters are kept in
    ``state.best_params``.
    """
    if not split.train:
        raise ValueError("training split is empty")
    if state is None:
        state = initial_state(model_cfg, train_cfg, split.train)
    loss_cfg = train_cfg.loss
    train_samples = list(split.train)
    y_all = np.array([s.label for s in train_samples])
    n = len(train_samples)

    while state.epoch < train_cfg.epochs:
        epoch = state.epoch
        t0 = time.perf_counter()
        order = np.random.default_rng((train_cfg.seed, epoch, 1)).permutation(n)
        X_all, _ = subsample_batch(train_samples, train_cfg.seq_len, train_cfg.seed, epoch)
        epoch_loss = 0.0
        for b, start in enumerate(range(0, n, train_cfg.batch_size)):
            idx = order[start:start + train_cfg.batch_size]
            loss, grads = batch_gradients(
                state.params, model_cfg, loss_cfg, X_all[idx], y_all[idx],
                train_cfg.micro_batch, (train_cfg.seed, epoch, b),
            )
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            if train_cfg.grad_clip is not None:
                _clip(grads, train_cfg.grad_clip)
            adam_step(state, grads, train_cfg.learning_rate, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
            epoch_loss += loss * len(idx)

        val_loss, val_acc, val_stop = validation_metrics(
            state.params, model_cfg, loss_cfg, split.val, train_cfg.seq_len
        )
        state.history.append({
            "epoch": epoch,
            "train_loss": epoch_loss / n,
            "val_loss": val_loss,
            "val_accuracy": val_acc,
            "val_mean_stop_fraction": val_stop,
        })
        if state.best_params is None or val_acc > state.best_val_accuracy:
            state.best_params = state.params.copy()
            state.best_epoch = epoch
            state.best_val_accuracy = val_acc
        state.epoch += 1
        log.info(
            "epoch %d train_loss %.4f val_loss %.4f val_acc %.3f val_stop %.3f (%.1fs)",
            epoch, epoch_loss / n, val_loss, val_acc, val_stop, time.perf_counter() - t0,
        )
        if on_epoch is not None:
            on_epoch(state)

    return state.params, state.history, state


# ---------------------------------------------------------------------------
# history and checkpoint files


def history_csv(history: Sequence[dict]) -> str:
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append(",".join(str(row["epoch"]) if c == "epoch" else repr(float(row[c])) for c in HISTORY_COLUMNS))
    return "\n".join(lines) + "\n"


def save_history(path, history: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(history_csv(history))


def _arrays(d: dict[str, np.ndarray]) -> dict:
    return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in d.items()}


def _unarrays(d: dict) -> dict[str, np.ndarray]:
    return {k: np.array(e["data"], dtype=np.float64).reshape(e["shape"]) for k, e in d.items()}


def checkpoint_dict(state: TrainState, model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model_cfg),
        "train_config": asdict(train_cfg),
        "params": params_to_dict(state.params, model_cfg),
        "best_params": None if state.best_params is None else params_to_dict(state.best_params, model_cfg),
        "adam": {"m": _arrays(state.m), "v": _arrays(state.v), "step": state.step},
        "epoch": state.epoch,
        "best_epoch": state.best_epoch,
        "best_val_accuracy": state.best_val_accuracy if math.isfinite(state.best_val_accuracy) else None,
        "history": state.history,
    }


def save_checkpoint(path, state: TrainState, model_cfg: ModelConfig, train_cfg: TrainConfig) -> None:
    text = json.dumps(checkpoint_dict(state, model_cfg, train_cfg), sort_keys=True)
    Path(path).write_text(text, encoding="utf-8")


def load_checkpoint(path) -> tuple[TrainState, ModelConfig, TrainConfig]:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(d, dict) or d.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a training checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {d.get('version')!r}, expected {CHECKPOINT_VERSION}")
    try:
        model_cfg = ModelConfig.from_dict(d["model_config"])
        train_cfg = TrainConfig.from_dict(d["train_config"])
        params, _ = params_from_dict(d["params"])
        best = None if d["best_params"] is None else params_from_dict(d["best_params"])[0]
        state = TrainState(
            params,
            _unarrays(d["adam"]["m"]),
            _unarrays(d["adam"]["v"]),
            int(d["adam"]["step"]),
            int(d["epoch"]),
            list(d["history"]),
            best,
            int(d["best_epoch"]),
            -math.inf if d["best_val_accuracy"] is None else float(d["best_val_accuracy"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    return state, model_cfg, train_cfg
