"""Multi-layer LSTM classifier with a class head and a stopping head.

Observations are z-scored with fixed per-band statistics from the training
split, passed through ``num_layers`` LSTM layers (each followed by a learnable
layer norm, dropout between layers while training) and the last normalized
hidden state feeds two linear heads::

    yhat_t = softmax(h_t @ W_c + b_c)      # class scores, (B, M)
    p_t    = sigmoid(h_t @ W_s + b_s)      # stopping probability, (B,)

The final stopping probability of a full sequence is forced to one.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Value

PARAMS_FORMAT = "earlyclass-params"
PARAMS_VERSION = 1
SIGMA_FLOOR = 1e-8


@dataclass
class ModelConfig:
    input_dim: int = 13
    hidden_dim: int = 64
    num_layers: int = 4
    num_classes: int = 9
    dropout_rate: float = 0.5
    # sigmoid(-6.5) ~ 0.0015, so ~90% of the initial stop mass sits on the last step
    stop_bias_init_mean: float = -6.5
    stop_bias_init_std: float = 0.1
    layer_norm: bool = True

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "num_layers"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.stop_bias_init_std < 0:
            raise ValueError("stop_bias_init_std must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ParameterSet:
    """Learnable arrays by name plus the fixed input normalization statistics."""

    arrays: dict[str, Value]
    mu_x: np.ndarray
    sigma_x: np.ndarray

    def __getitem__(self, name: str) -> Value:
        return self.arrays[name]

    def values(self) -> list[Value]:
        return list(self.arrays.values())

    def zero_grad(self) -> None:
        dc.zero_grad(self.arrays.values())

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            {k: Value(v.data.copy(), requires_grad=True, name=k) for k, v in self.arrays.items()},
            self.mu_x.copy(),
            self.sigma_x.copy(),
        )

    def set_normalization(self, mu: np.ndarray, sigma: np.ndarray) -> None:
        self.mu_x = np.asarray(mu, dtype=np.float64).copy()
        self.sigma_x = np.maximum(np.asarray(sigma, dtype=np.float64), SIGMA_FLOOR)


@dataclass
class PredictionTrace:
    """Per-step class scores (T, M) and stopping probabilities (T,) of one sequence."""

    class_scores: np.ndarray
    stop_probs: np.ndarray

    def __len__(self) -> int:
        return len(self.stop_probs)


@dataclass
class BatchTrace:
    """Differentiable per-step outputs for a batch: T entries of (B, M) and (B,)."""

    scores: list[Value] = field(default_factory=list)
    stops: list[Value] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.stops)

    def numpy(self) -> list[PredictionTrace]:
        scores = np.stack([s.data for s in self.scores], axis=1)
        stops = np.stack([p.data for p in self.stops], axis=1)
        return [PredictionTrace(scores[i], stops[i]) for i in range(scores.shape[0])]


def init_parameters(cfg: ModelConfig, seed: int = 0) -> ParameterSet:
    rng = np.random.default_rng(seed)
    H, M = cfg.hidden_dim, cfg.num_classes
    bound = 1.0 / math.sqrt(H)
    arrays: dict[str, np.ndarray] = {}
    for layer in range(cfg.num_layers):
        fan_in = cfg.input_dim if layer == 0 else H
        arrays[f"lstm{layer}.w_ih"] = rng.uniform(-bound, bound, (fan_in, 4 * H))
        arrays[f"lstm{layer}.w_hh"] = rng.uniform(-bound, bound, (H, 4 * H))
        bias = rng.uniform(-bound, bound, 4 * H)
        bias[H:2 * H] = 1.0  # forget gate
        arrays[f"lstm{layer}.bias"] = bias
        arrays[f"ln{layer}.gain"] = np.ones(H)
        arrays[f"ln{layer}.offset"] = np.zeros(H)
    arrays["head_c.weight"] = rng.uniform(-bound, bound, (H, M))
    arrays["head_c.bias"] = np.zeros(M)
    arrays["head_stop.weight"] = rng.uniform(-bound, bound, (H, 1))
    arrays["head_stop.bias"] = rng.normal(cfg.stop_bias_init_mean, cfg.stop_bias_init_std, 1)
    return ParameterSet(
        {k: Value(v, requires_grad=True, name=k) for k, v in arrays.items()},
        np.zeros(cfg.input_dim),
        np.ones(cfg.input_dim),
    )


def layer_norm(x, gain, offset) -> Value:
    return dc.layer_norm(x, gain, offset, eps=1e-5)


def lstm_cell(x_in, h_prev, c_prev, w_ih, w_hh, bias) -> tuple[Value, Value]:
    """One LSTM step on row batches; returns ``(h, c)``."""
    H = dc.as_value(h_prev).shape[-1]
    state = dc.lstm_step(x_in, h_prev, c_prev, w_ih, w_hh, bias)
    return dc.columns(state, 0, H), dc.columns(state, H, 2 * H)


def lstm_cell_composed(x_in, h_prev, c_prev, w_ih, w_hh, bias) -> tuple[Value, Value]:
    """Same step built from primitive ops; slower, kept as a cross-check."""
    H = dc.as_value(h_prev).shape[-1]
    gates = dc.add(dc.add(dc.matmul(x_in, w_ih), dc.matmul(h_prev, w_hh)), bias)
    i = dc.sigmoid(dc.columns(gates, 0, H))
    f = dc.sigmoid(dc.columns(gates, H, 2 * H))
    g = dc.tanh(dc.columns(gates, 2 * H, 3 * H))
    o = dc.sigmoid(dc.columns(gates, 3 * H, 4 * H))
    c = dc.add(dc.mul(f, c_prev), dc.mul(i, g))
    h = dc.mul(o, dc.tanh(c))
    return h, c


def normalize_inputs(params: ParameterSet, X: np.ndarray) -> np.ndarray:
    return (X - params.mu_x) / params.sigma_x


def forward_batch(
    params: ParameterSet,
    cfg: ModelConfig,
    X: np.ndarray,
    training: bool = False,
    dropout_seed: int = 0,
    force_terminal: bool = True,
) -> BatchTrace:
    """Run the network over a (B, T, D) batch of equal-length sequences."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[2] != cfg.input_dim:
        raise dc.ShapeError(f"expected (B, T, {cfg.input_dim}) observations, got {X.shape}")
    B, T, _ = X.shape
    if T < 1:
        raise dc.ShapeError("sequence must have at least one observation")
    H = cfg.hidden_dim
    Xn = normalize_inputs(params, X)
    rng = np.random.default_rng(dropout_seed) if training and cfg.dropout_rate > 0 else None
    keep = 1.0 - cfg.dropout_rate

    layer_inputs: list = [Xn[:, t, :] for t in range(T)]
    for layer in range(cfg.num_layers):
        w_ih = params[f"lstm{layer}.w_ih"]
        w_hh = params[f"lstm{layer}.w_hh"]
        bias = params[f"lstm{layer}.bias"]
        gain, offset = params[f"ln{layer}.gain"], params[f"ln{layer}.offset"]
        h = Value(np.zeros((B, H)))
        c = Value(np.zeros((B, H)))
        outputs = []
        for t in range(T):
            x_in = layer_inputs[t]
            if layer > 0 and rng is not None:
                mask = (rng.random((B, H)) < keep) / keep
                x_in = dc.mul(x_in, mask)
            h, c = lstm_cell(x_in, h, c, w_ih, w_hh, bias)
            outputs.append(layer_norm(h, gain, offset) if cfg.layer_norm else h)
        layer_inputs = outputs

    trace = BatchTrace()
    w_c, b_c = params["head_c.weight"], params["head_c.bias"]
    w_s, b_s = params["head_stop.weight"], params["head_stop.bias"]
    for t, feat in enumerate(layer_inputs):
        trace.scores.append(dc.softmax(dc.add(dc.matmul(feat, w_c), b_c)))
        if force_terminal and t == T - 1:
            trace.stops.append(Value(np.ones(B)))
        else:
            trace.stops.append(dc.column(dc.sigmoid(dc.add(dc.matmul(feat, w_s), b_s)), 0))
    return trace


def forward(
    params: ParameterSet,
    cfg: ModelConfig,
    X: np.ndarray,
    training: bool = False,
    dropout_seed: int = 0,
    force_terminal: bool = True,
) -> PredictionTrace:
    """Prediction trace of a single (T, D) sequence, no gradient recording."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cfg.input_dim:
        raise dc.ShapeError(f"expected (T, {cfg.input_dim}) observations, got {X.shape}")
    with dc.no_grad():
        return forward_batch(params, cfg, X[None], training, dropout_seed, force_terminal).numpy()[0]


def predict_batch(params: ParameterSet, cfg: ModelConfig, X: np.ndarray, chunk: int = 512) -> list[PredictionTrace]:
    out: list[PredictionTrace] = []
    with dc.no_grad():
        for start in range(0, len(X), chunk):
            out.extend(forward_batch(params, cfg, X[start:start + chunk]).numpy())
    return out


# ---------------------------------------------------------------------------
# parameter files


def params_to_dict(params: ParameterSet, cfg: ModelConfig) -> dict:
    return {
        "format": PARAMS_FORMAT,
        "version": PARAMS_VERSION,
        "config": asdict(cfg),
        "normalization": {"mu": params.mu_x.tolist(), "sigma": params.sigma_x.tolist()},
        "arrays": {
            k: {"shape": list(v.shape), "data": v.data.ravel().tolist()} for k, v in params.arrays.items()
        },
    }


def params_from_dict(d: dict) -> tuple[ParameterSet, ModelConfig]:
    if d.get("format") != PARAMS_FORMAT:
        raise ValueError(f"not a parameter file (format={d.get('format')!r})")
    if d.get("version") != PARAMS_VERSION:
        raise ValueError(f"unsupported parameter file version {d.get('version')!r}, expected {PARAMS_VERSION}")
    cfg = ModelConfig.from_dict(d["config"])
    expected = init_parameters(cfg, 0)
    arrays = {}
    for name, ref in expected.arrays.items():
        if name not in d["arrays"]:
            raise ValueError(f"parameter file is missing array {name!r}")
        entry = d["arrays"][name]
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != ref.shape:
            raise ValueError(f"{name}: shape {arr.shape} does not match config shape {ref.shape}")
        arrays[name] = Value(arr, requires_grad=True, name=name)
    norm = d["normalization"]
    return ParameterSet(arrays, np.array(norm["mu"], dtype=np.float64), np.array(norm["sigma"], dtype=np.float64)), cfg


def save_parameters(path, params: ParameterSet, cfg: ModelConfig) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params, cfg)), encoding="utf-8")


def load_parameters(path) -> tuple[ParameterSet, ModelConfig]:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: malformed parameter file ({exc})") from None
    return params_from_dict(d)
