"""Classification metrics, stop-time statistics, evaluation and the alpha sweep."""

from __future__ import annotations

import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .data import DatasetSplit, TimeSeriesSample, subsample_batch
from .earliness import sample_stops, stopping_distribution
from .model import ModelConfig, ParameterSet, forward_batch

log = logging.getLogger(__name__)

STOP_MODES = ("sampled", "expected", "final")
EVAL_SEED = 104729
METRICS = ("accuracy", "tstop", "precision", "recall", "f1", "kappa")
SWEEP_COLUMNS = ("alpha",) + tuple(f"{m}_{s}" for m in METRICS for s in ("mean", "std"))
STOP_STATS_COLUMNS = (
    "class", "n", "min", "q1", "median", "q3", "max",
    "min_doy", "q1_doy", "median_doy", "q3_doy", "max_doy",
)


# ---------------------------------------------------------------------------
# confusion-matrix metrics


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class

    @classmethod
    def from_labels(cls, y_true, y_pred, num_classes: int) -> "ConfusionMatrix":
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true, dtype=np.intp), np.asarray(y_pred, dtype=np.intp)), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        if self.total == 0:
            raise ValueError("empty confusion matrix")
        return float(np.trace(self.counts)) / self.total


@dataclass
class ClassScores:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    degenerate: np.ndarray  # True where a zero denominator forced a 0 score

    @property
    def macro_precision(self) -> float:
        return float(self.precision.mean())

    @property
    def macro_recall(self) -> float:
        return float(self.recall.mean())

    @property
    def macro_f1(self) -> float:
        return float(self.f1.mean())


def precision_recall_f1(cm: ConfusionMatrix) -> ClassScores:
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    predicted = c.sum(axis=0)
    actual = c.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(actual > 0, tp / actual, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    degenerate = (predicted == 0) | (actual == 0)
    return ClassScores(precision, recall, f1, degenerate)


def kappa(cm: ConfusionMatrix) -> tuple[float, bool]:
    """Cohen's kappa and a flag set when chance agreement is 1 (kappa defined 0)."""
    n = cm.total
    if n == 0:
        raise ValueError("kappa of an empty confusion matrix")
    c = cm.counts.astype(np.float64)
    p_o = np.trace(c) / n
    p_e = float((c.sum(axis=0) * c.sum(axis=1)).sum()) / (n * n)
    if p_e >= 1.0:
        return 0.0, True
    return (p_o - p_e) / (1.0 - p_e), False


# ---------------------------------------------------------------------------
# stop-time statistics


@dataclass
class ClassStopStats:
    label: int
    name: str
    n: int
    fraction: tuple[float, float, float, float, float]
    day: tuple[float, float, float, float, float]


def five_numbers(values) -> tuple[float, float, float, float, float]:
    q = np.quantile(np.asarray(values, dtype=np.float64), [0.0, 0.25, 0.5, 0.75, 1.0], method="linear")
    return tuple(float(v) for v in q)


def stop_time_stats(
    t_stop: np.ndarray,
    labels: np.ndarray,
    days: np.ndarray,
    num_classes: int,
    class_names: Sequence[str] | None = None,
) -> list[ClassStopStats]:
    """Five-number summaries of stop times grouped by true class.

    ``days`` is the (N, T) day-of-year of each evaluated observation so stops
    can be reported both as index fractions and as calendar days.
    """
    t_stop = np.asarray(t_stop)
    labels = np.asarray(labels)
    days = np.asarray(days)
    T = days.shape[1]
    stop_days = days[np.arange(len(t_stop)), t_stop]
    frac = t_stop / (T - 1) if T > 1 else np.ones(len(t_stop))
    out = []
    for k in range(num_classes):
        mask = labels == k
        name = class_names[k] if class_names is not None else str(k)
        if not mask.any():
            warnings.warn(f"no stop decisions for class {name}; omitted from stop statistics", stacklevel=2)
            continue
        out.append(ClassStopStats(k, name, int(mask.sum()), five_numbers(frac[mask]), five_numbers(stop_days[mask])))
    return out


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    accuracy: float
    accuracy_std: float
    tstop: float
    tstop_std: float
    expected_tstop: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_precision_std: float
    macro_recall: float
    macro_recall_std: float
    macro_f1: float
    macro_f1_std: float
    kappa: float
    kappa_std: float
    degenerate_classes: list[int]
    stop_stats: list[ClassStopStats]
    stop_mode: str
    repeats: int
    confusion: ConfusionMatrix
    t_stop: np.ndarray = field(repr=False)
    predictions: np.ndarray = field(repr=False)

    def metric(self, name: str) -> tuple[float, float]:
        """(mean, std) of one summary metric by short name."""
        table = {
            "accuracy": (self.accuracy, self.accuracy_std),
            "tstop": (self.tstop, self.tstop_std),
            "precision": (self.macro_precision, self.macro_precision_std),
            "recall": (self.macro_recall, self.macro_recall_std),
            "f1": (self.macro_f1, self.macro_f1_std),
            "kappa": (self.kappa, self.kappa_std),
        }
        return table[name]

    def summary(self) -> str:
        rows = [f"{m:<10s} {self.metric(m)[0]:.4f} +- {self.metric(m)[1]:.4f}" for m in METRICS]
        rows.append(f"{'E[tstop]':<10s} {self.expected_tstop:.4f}")
        return "\n".join(rows)


def stop_indices(stop_probs: np.ndarray, mode: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """Stop index per sequence for the given mode.

    ``sampled`` draws from the stop probabilities, ``expected`` takes the median
    of the stopping distribution (a deterministic stand-in for a draw) and
    ``final`` always uses the last step.
    """
    N, T = stop_probs.shape
    if mode == "final":
        return np.full(N, T - 1, dtype=np.intp)
    if mode == "sampled":
        return sample_stops(stop_probs, rng if rng is not None else np.random.default_rng(EVAL_SEED))
    if mode == "expected":
        cdf = np.cumsum(np.stack([stopping_distribution(p) for p in stop_probs]), axis=1)
        return (cdf >= 0.5 - 1e-12).argmax(axis=1).astype(np.intp)
    raise ValueError(f"stop mode must be one of {STOP_MODES}, got {mode!r}")


def evaluate_traces(
    class_scores: np.ndarray,
    stop_probs: np.ndarray,
    labels: np.ndarray,
    days: np.ndarray | None = None,
    stop_mode: str = "sampled",
    repeats: int = 1,
    seed: int = EVAL_SEED,
    class_names: Sequence[str] | None = None,
) -> EvalReport:
    """Score precomputed traces: (N, T, M) class scores and (N, T) stop probabilities."""
    class_scores = np.asarray(class_scores, dtype=np.float64)
    stop_probs = np.asarray(stop_probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    N, T, M = class_scores.shape
    if N == 0:
        raise ValueError("cannot evaluate an empty test set")
    if stop_mode not in STOP_MODES:
        raise ValueError(f"stop mode must be one of {STOP_MODES}, got {stop_mode!r}")
    if days is None:
        days = np.tile(np.arange(T, dtype=np.float64), (N, 1))
    repeats = repeats if stop_mode == "sampled" else 1
    if repeats < 1:
        raise ValueError("repeats must be >= 1")

    rng = np.random.default_rng(seed)
    expected = float(np.mean([_expected_fraction(p) for p in stop_probs]))
    per_run = {m: [] for m in METRICS}
    all_stops, all_preds, all_labels, all_days = [], [], [], []
    pooled = np.zeros((M, M), dtype=np.int64)
    for _ in range(repeats):
        t_stop = stop_indices(stop_probs, stop_mode, rng)
        pred = class_scores[np.arange(N), t_stop].argmax(axis=1)
        cm = ConfusionMatrix.from_labels(labels, pred, M)
        pooled += cm.counts
        scores = precision_recall_f1(cm)
        per_run["accuracy"].append(cm.accuracy())
        if stop_mode == "expected":
            # labels come from the median stop; the reported time is the mean under P
            per_run["tstop"].append(expected)
        else:
            per_run["tstop"].append(float((t_stop / (T - 1)).mean()) if T > 1 else 1.0)
        per_run["precision"].append(scores.macro_precision)
        per_run["recall"].append(scores.macro_recall)
        per_run["f1"].append(scores.macro_f1)
        per_run["kappa"].append(kappa(cm)[0])
        all_stops.append(t_stop)
        all_preds.append(pred)
        all_labels.append(labels)
        all_days.append(days)

    confusion = ConfusionMatrix(pooled)
    pooled_scores = precision_recall_f1(confusion)
    stops = np.concatenate(all_stops)
    stats = stop_time_stats(stops, np.concatenate(all_labels), np.concatenate(all_days), M, class_names)
    mean = {m: float(np.mean(v)) for m, v in per_run.items()}
    std = {m: float(np.std(v)) for m, v in per_run.items()}
    return EvalReport(
        accuracy=mean["accuracy"], accuracy_std=std["accuracy"],
        tstop=mean["tstop"], tstop_std=std["tstop"],
        expected_tstop=expected,
        precision=pooled_scores.precision, recall=pooled_scores.recall, f1=pooled_scores.f1,
        macro_precision=mean["precision"], macro_precision_std=std["precision"],
        macro_recall=mean["recall"], macro_recall_std=std["recall"],
        macro_f1=mean["f1"], macro_f1_std=std["f1"],
        kappa=mean["kappa"], kappa_std=std["kappa"],
        degenerate_classes=[int(k) for k in np.flatnonzero(pooled_scores.degenerate)],
        stop_stats=stats, stop_mode=stop_mode, repeats=repeats, confusion=confusion,
        t_stop=stops, predictions=np.concatenate(all_preds),
    )


def _expected_fraction(p: np.ndarray) -> float:
    P = stopping_distribution(p)
    T = len(P)
    return 1.0 if T == 1 else float(np.dot(P, np.arange(T)) / (T - 1))


def predict_traces(
    params: ParameterSet,
    cfg: ModelConfig,
    samples: Sequence[TimeSeriesSample],
    seq_len: int,
    seed: int = EVAL_SEED,
    chunk: int = 512,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Class scores (N, T, M), stop probabilities (N, T) and days (N, T) for ``samples``."""
    X, days = subsample_batch(samples, seq_len, seed)
    scores, stops = [], []
    with dc.no_grad():
        for start in range(0, len(X), chunk):
            trace = forward_batch(params, cfg, X[start:start + chunk])
            scores.append(np.stack([s.data for s in trace.scores], axis=1))
            stops.append(np.stack([p.data for p in trace.stops], axis=1))
    return np.concatenate(scores), np.concatenate(stops), days


def evaluate(
    params: ParameterSet,
    cfg: ModelConfig,
    samples: Sequence[TimeSeriesSample],
    seq_len: int = 70,
    stop_mode: str = "sampled",
    repeats: int = 1,
    seed: int = EVAL_SEED,
    class_names: Sequence[str] | None = None,
) -> EvalReport:
    """Run the model without dropout on ``samples`` and score its stop decisions."""
    if not samples:
        raise ValueError("cannot evaluate an empty test set")
    scores, stops, days = predict_traces(params, cfg, samples, seq_len, seed)
    labels = np.array([s.label for s in samples])
    return evaluate_traces(scores, stops, labels, days, stop_mode, repeats, seed, class_names)


# ---------------------------------------------------------------------------
# report files


def _fmt(x: float) -> str:
    return repr(float(x))


def report_csv(report: EvalReport) -> str:
    lines = ["metric,mean,std"]
    for m in METRICS:
        mean, std = report.metric(m)
        lines.append(f"{m},{_fmt(mean)},{_fmt(std)}")
    lines.append(f"expected_tstop,{_fmt(report.expected_tstop)},")
    for k in range(len(report.precision)):
        lines.append(f"precision_{k},{_fmt(report.precision[k])},")
        lines.append(f"recall_{k},{_fmt(report.recall[k])},")
        lines.append(f"f1_{k},{_fmt(report.f1[k])},")
    return "\n".join(lines) + "\n"


def confusion_csv(cm: ConfusionMatrix) -> str:
    M = cm.counts.shape[0]
    lines = ["true\\pred," + ",".join(str(k) for k in range(M))]
    for k in range(M):
        lines.append(f"{k}," + ",".join(str(int(v)) for v in cm.counts[k]))
    return "\n".join(lines) + "\n"


def stop_stats_csv(stats: Sequence[ClassStopStats]) -> str:
    lines = [",".join(STOP_STATS_COLUMNS)]
    for s in stats:
        values = [s.name, str(s.n)] + [_fmt(v) for v in s.fraction] + [_fmt(v) for v in s.day]
        lines.append(",".join(values))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# alpha sweep


@dataclass
class SweepCell:
    alpha: float
    seed: int
    report: EvalReport | None
    error: str | None
    seconds: float
    params: ParameterSet | None = field(default=None, repr=False)


@dataclass
class SweepResult:
    cells: list[SweepCell]

    def alphas(self) -> list[float]:
        return sorted({c.alpha for c in self.cells})

    def ok_cells(self, alpha: float) -> list[SweepCell]:
        return [c for c in self.cells if c.alpha == alpha and c.report is not None]

    def row(self, alpha: float) -> dict[str, float]:
        cells = self.ok_cells(alpha)
        row = {"alpha": alpha}
        for m in METRICS:
            vals = [c.report.metric(m)[0] for c in cells]
            row[f"{m}_mean"] = float(np.mean(vals)) if vals else math.nan
            row[f"{m}_std"] = float(np.std(vals)) if vals else math.nan
        return row

    def table_csv(self) -> str:
        lines = [",".join(SWEEP_COLUMNS)]
        for a in self.alphas():
            row = self.row(a)
            lines.append(",".join(_fmt(row[c]) for c in SWEEP_COLUMNS))
        return "\n".join(lines) + "\n"

    def cells_csv(self) -> str:
        lines = ["alpha,seed,status," + ",".join(METRICS) + ",seconds"]
        for c in self.cells:
            if c.report is None:
                metrics = ",".join("" for _ in METRICS)
                status = "failed: " + (c.error or "").replace(",", ";").replace("\n", " ")
            else:
                metrics = ",".join(_fmt(c.report.metric(m)[0]) for m in METRICS)
                status = "ok"
            lines.append(f"{_fmt(c.alpha)},{c.seed},{status},{metrics},{c.seconds:.1f}")
        return "\n".join(lines) + "\n"


def parse_sweep_csv(text: str) -> list[dict[str, float]]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split(",")
    if tuple(header) != SWEEP_COLUMNS:
        raise ValueError(f"unexpected sweep header {header}")
    return [dict(zip(header, map(float, ln.split(",")))) for ln in lines[1:]]


def alpha_sweep(
    model_cfg: ModelConfig,
    train_cfg,
    split: DatasetSplit,
    alphas: Sequence[float],
    seeds_per_alpha: int = 3,
    stop_mode: str = "sampled",
    repeats: int = 1,
    workers: int = 1,
    keep_params: bool = False,
    class_names: Sequence[str] | None = None,
) -> SweepResult:
    """Train and evaluate one model per (alpha, seed); failures are recorded per cell."""
    from .train import train

    alphas = list(alphas)
    if not alphas:
        raise ValueError("alpha list is empty")
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ValueError(f"alphas must lie in [0, 1], got {alphas}")
    if seeds_per_alpha < 1:
        raise ValueError("seeds_per_alpha must be >= 1")
    if not split.test:
        raise ValueError("sweep needs a non-empty test split")
    grid = [(float(a), train_cfg.seed + k) for a in alphas for k in range(seeds_per_alpha)]

    def run(cell: tuple[float, int]) -> SweepCell:
        alpha, seed = cell
        t0 = time.perf_counter()
        try:
            cfg = replace(train_cfg, alpha=alpha, seed=seed, loss_mode="early_reward")
            params, _, _ = train(model_cfg, cfg, split)
            report = evaluate(params, model_cfg, split.test, cfg.seq_len, stop_mode, repeats,
                              class_names=class_names)
        except Exception as exc:  # one failed cell must not sink the sweep
            log.warning("sweep cell alpha=%s seed=%s failed: %s", alpha, seed, exc)
            return SweepCell(alpha, seed, None, f"{type(exc).__name__}: {exc}", time.perf_counter() - t0)
        log.info("sweep cell alpha=%s seed=%s acc %.3f tstop %.3f", alpha, seed, report.accuracy, report.tstop)
        return SweepCell(alpha, seed, report, None, time.perf_counter() - t0, params if keep_params else None)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(run, grid))
    else:
        cells = [run(c) for c in grid]
    return SweepResult(cells)
