"""Optimization of model parameters (delays included) and evaluation metrics.

Adam with bias correction over mini-batches of sliding windows; after every
step the delay table is projected back into [0, tau_max] with self-loops
pinned at zero, and the spatial ratio c is clamped to the stability bound
when enforcement is on.  Standardization statistics come from the training
split only and are reused everywhere else.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import FlowSeries, windows
from .delays import DelayTable, project_delays
from .errors import DivergenceError, InputError
from .graph import TrafficGraph, build_graph
from .model import (
    ModelParams,
    WEIGHT_KEYS,
    init_params,
    loss_and_gradients,
    predict_batch,
)

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "StandardizeStats",
    "EpochStats",
    "adam_step",
    "train",
    "metrics",
    "standardize",
    "save_history_csv",
    "save_checkpoint",
    "load_checkpoint",
]

_DELAY_KEYS = ("tau_offpeak", "tau_peak")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    epochs: int = 200
    delta: float = 1.0          # Huber knee, standardized units
    eta: float = 0.25           # solver step, data-grid units
    enforce_stability: bool = False
    seed: int = 0
    hidden_dim: int = 64
    t_in: int = 12
    t_out: int = 12
    learnable_delays: bool = True
    delay_lr_multiplier: float = 1.0

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "epochs", "delta", "eta",
                     "hidden_dim", "t_in", "t_out"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive")


@dataclass
class StandardizeStats:
    mean: float
    std: float
    zero_variance: bool = False

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


def standardize(series, stats: StandardizeStats | None = None):
    """Remove the mean and scale to unit (population) variance.

    Without `stats`, computes them from `series` (the training portion);
    a zero standard deviation is replaced by 1 with the flag set.  Returns
    (standardized array, stats); stats.invert is the exact inverse.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise InputError("cannot standardize an empty series")
    if stats is None:
        mean = float(x.mean())
        std = float(x.std())
        zero = std == 0.0
        stats = StandardizeStats(mean=mean, std=1.0 if zero else std,
                                 zero_variance=zero)
    return stats.apply(x), stats


def metrics(pred, truth):
    """(MAE, RMSE, MAPE); MAPE masks truth entries with |y| <= 1e-3 and is
    NaN when everything is masked."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise InputError(f"shape mismatch {pred.shape} vs {truth.shape}")
    err = truth - pred
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err * err).mean()))
    mask = np.abs(truth) > 1e-3
    if mask.any():
        mape = float(100.0 * np.abs(err[mask] / truth[mask]).mean())
    else:
        mape = math.nan
    return mae, rmse, mape


@dataclass
class OptimizerState:
    """Adam accumulators keyed like the parameter pytree."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptimizerState":
        keys = {k: np.zeros_like(v) for k, v in params.weights.items()}
        keys["tau_offpeak"] = np.zeros_like(params.delays.tau_offpeak)
        keys["tau_peak"] = np.zeros_like(params.delays.tau_peak)
        return cls(m=keys, v={k: np.zeros_like(v) for k, v in keys.items()})


def adam_step(state: OptimizerState, params: ModelParams, grads: dict,
              lr: float, *, delay_lr_multiplier: float = 1.0,
              update_delays: bool = True, c_max: float | None = None):
    """One bias-corrected Adam update, in place, then delay projection and the
    optional c clamp.  Raises DivergenceError on non-finite gradients."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t

    def update(key, target, g, rate):
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {key} at step {t}")
        m = state.m[key]
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        target -= rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)

    for key in params.weights:
        update(key, params.weights[key], grads[key], lr)
    if update_delays:
        update("tau_offpeak", params.delays.tau_offpeak, grads["tau_offpeak"],
               lr * delay_lr_multiplier)
        update("tau_peak", params.delays.tau_peak, grads["tau_peak"],
               lr * delay_lr_multiplier)
    params.delays = project_delays(params.delays)
    c = params.weights["c"]
    hi = c_max if c_max is not None else np.inf
    params.weights["c"] = np.array(min(max(float(c), 1e-6), hi))
    return params, state


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_mae: float
    val_rmse: float
    val_mape: float


def _window_tensors(series: FlowSeries, t_in: int, t_out: int):
    """Stack sliding windows into (W,T,N,1) inputs, (W,R,N,1) targets, anchors."""
    pairs = windows(series, t_in, t_out)
    if not pairs:
        raise InputError(
            f"series of length {series.length} yields no {t_in}/{t_out} windows"
        )
    inputs = np.stack([p[0].values for p in pairs])[..., None]
    targets = np.stack([p[1].values for p in pairs])[..., None]
    if series.start_minute_of_day is None:
        anchors = None
    else:
        starts = np.arange(len(pairs)) * series.interval_minutes
        anchors = (series.start_minute_of_day + starts) % 1440.0
    return inputs, targets, anchors


def _validation_metrics(params, graph, inputs, targets, anchors, offsets,
                        stats, eta, interval):
    preds = predict_batch(params, graph, stats.apply(inputs), offsets,
                          eta=eta, anchors=anchors, interval_minutes=interval)
    return metrics(stats.invert(preds), targets)


def train(train_series: FlowSeries, val_series: FlowSeries | None,
          graph: TrafficGraph, config: TrainConfig, *,
          delays: DelayTable | None = None,
          initial: ModelParams | None = None):
    """Mini-batch training; keeps the best-validation-MAE checkpoint.

    The 6:2:2 chronological split happens upstream; this consumes the train
    and validation series directly.  Returns (best params, list[EpochStats]).
    """
    tr_in, tr_tgt, tr_anchor = _window_tensors(train_series, config.t_in, config.t_out)
    has_val = val_series is not None and val_series.length >= config.t_in + config.t_out
    if has_val:
        va_in, va_tgt, va_anchor = _window_tensors(val_series, config.t_in, config.t_out)

    _, stats = standardize(train_series.values)
    offsets = np.arange(1, config.t_out + 1, dtype=np.float64)
    interval = train_series.interval_minutes

    params = initial.copy() if initial is not None else init_params(
        1, config.hidden_dim, 1, graph, seed=config.seed, delays=delays,
        tau_max=float(config.t_in),
    )
    params.delays.learnable = config.learnable_delays
    c_max = 1.0 / graph.max_degree if config.enforce_stability else None
    if c_max is not None:
        params.weights["c"] = np.array(min(params.c, c_max))
    opt = OptimizerState.for_params(params)
    rng = np.random.default_rng(config.seed)

    n_windows = len(tr_in)
    std_inputs = stats.apply(tr_in)
    std_targets = stats.apply(tr_tgt)
    history: list[EpochStats] = []
    best_key = math.inf
    best = params.copy()

    for epoch in range(config.epochs):
        order = rng.permutation(n_windows)
        total, seen = 0.0, 0
        for lo in range(0, n_windows, config.batch_size):
            sel = order[lo: lo + config.batch_size]
            anchors = None if tr_anchor is None else tr_anchor[sel]
            loss, grads, _ = loss_and_gradients(
                params, graph, std_inputs[sel], offsets, std_targets[sel],
                eta=config.eta, delta=config.delta, anchors=anchors,
                interval_minutes=interval,
            )
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {lo // config.batch_size}"
                )
            adam_step(opt, params, grads, config.learning_rate,
                      delay_lr_multiplier=config.delay_lr_multiplier,
                      update_delays=config.learnable_delays, c_max=c_max)
            total += loss * len(sel)
            seen += len(sel)
        train_loss = total / seen
        if has_val:
            val_mae, val_rmse, val_mape = _validation_metrics(
                params, graph, va_in, va_tgt, va_anchor, offsets, stats,
                config.eta, interval,
            )
            key = val_mae
        else:
            val_mae = val_rmse = val_mape = math.nan
            key = train_loss
        history.append(EpochStats(epoch, train_loss, val_mae, val_rmse, val_mape))
        if key < best_key:
            best_key = key
            best = params.copy()
    return best, history


def save_history_csv(history, path):
    """Emit `epoch,train_loss,val_mae,val_rmse,val_mape` rows."""
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_mae,val_rmse,val_mape\n")
        for h in history:
            fh.write(
                f"{h.epoch},{h.train_loss!r},{h.val_mae!r},{h.val_rmse!r},{h.val_mape!r}\n"
            )


# ---------------------------------------------------------------------------
# Checkpoint container: self-describing JSON, exact float round-trip via repr.

_CKPT_MAGIC = "STDDE-CKPT"
_CKPT_VERSION = 1


def save_checkpoint(path, params: ModelParams, graph: TrafficGraph,
                    stats: StandardizeStats | None = None,
                    config: dict | None = None):
    d = params.delays
    doc = {
        "magic": _CKPT_MAGIC,
        "version": _CKPT_VERSION,
        "dims": {
            "input_dim": params.input_dim,
            "hidden_dim": params.hidden_dim,
            "output_dim": params.output_dim,
        },
        "graph": {"node_count": graph.node_count, "edges": graph.edges},
        "weights": {k: params.weights[k].tolist() for k in WEIGHT_KEYS},
        "delays": {
            "tau_offpeak": d.tau_offpeak.tolist(),
            "tau_peak": d.tau_peak.tolist(),
            "peak_windows": [list(w) for w in d.peak_windows],
            "learnable": bool(d.learnable),
            "tau_max": d.tau_max,
        },
        "standardization": None if stats is None else {
            "mean": stats.mean, "std": stats.std,
            "zero_variance": stats.zero_variance,
        },
        "config": config or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Returns (params, graph, stats or None, config dict)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("magic") != _CKPT_MAGIC:
        raise InputError(f"{path} is not a model checkpoint")
    if doc.get("version") != _CKPT_VERSION:
        raise InputError(f"unsupported checkpoint version {doc.get('version')}")
    g = doc["graph"]
    graph = build_graph(g["node_count"], g["edges"])
    dd = doc["delays"]
    delays = DelayTable(
        tau_offpeak=np.array(dd["tau_offpeak"], dtype=np.float64),
        tau_peak=np.array(dd["tau_peak"], dtype=np.float64),
        peak_windows=tuple(tuple(w) for w in dd["peak_windows"]),
        learnable=dd["learnable"],
        tau_max=dd["tau_max"],
        self_loop_mask=graph.self_loop_mask.copy(),
    )
    dims = doc["dims"]
    params = ModelParams(
        input_dim=dims["input_dim"],
        hidden_dim=dims["hidden_dim"],
        output_dim=dims["output_dim"],
        weights={k: np.array(v, dtype=np.float64) for k, v in doc["weights"].items()},
        delays=delays,
    )
    st = doc.get("standardization")
    stats = None if st is None else StandardizeStats(**st)
    return params, graph, stats, doc.get("config", {})
