"""The delay-DDE forecasting network.

Input phase: a constant history h(0) = phi encoded from the first observed
frame, then gated continuous dynamics

    g_i(t) = c * sum_j alpha_ij * Wn h_j(t - tau_ij)
    z_i(t) = sigmoid(Wz h_i(t) + Uz g_i(t) + bz)
    dh_i/dt = (1 - z_i) . (g_i - h_i) . (Wc dX_i/dt + bc)

driven by the spline control path of the window.  Output phase: a second
parameter set runs the same gated dynamics without the control factor,
starting from the input phase's final state and using the whole input
trajectory as its history, so predictions can be read at arbitrary positive
horizon offsets through the output map.

All gradients (weights, c, and per-edge delays in both regimes) come from the
solver's reverse sweep plus the local vector-Jacobian products defined here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .delays import DelayTable, project_delays, zero_delay_table
from .errors import InputError
from .graph import TrafficGraph
from .solver import HistoryFunction, SolverConfig, Trajectory, backward, integrate
from .spline import SplinePath, fit_natural_cubic

__all__ = [
    "ModelParams",
    "Forecast",
    "init_params",
    "encode_history",
    "update_vector",
    "derivative",
    "decode",
    "huber_loss",
    "forecast",
    "loss_and_gradients",
]

WEIGHT_KEYS = (
    "hist_w1", "hist_b1", "hist_w2", "hist_b2",
    "enc_wz", "enc_uz", "enc_bz", "enc_wn",
    "ctrl_w", "ctrl_b",
    "dec_wz", "dec_uz", "dec_bz", "dec_wn",
    "out_w", "out_b",
    "c",
)


@dataclass
class ModelParams:
    """All learnable quantities, weight blocks keyed by name.

    `weights` holds the gate maps, neighbor map, control map, history encoder,
    output map, the decoder's own gate/neighbor set, and the scalar spatial
    ratio `c` (0-d array).  `delays` is the shared two-regime table.
    """

    input_dim: int
    hidden_dim: int
    output_dim: int
    weights: dict
    delays: DelayTable

    @property
    def c(self) -> float:
        return float(self.weights["c"])

    def copy(self) -> "ModelParams":
        return ModelParams(
            input_dim=self.input_dim,
            hidden_dim=self.hidden_dim,
            output_dim=self.output_dim,
            weights={k: np.array(v, copy=True) for k, v in self.weights.items()},
            delays=self.delays.copy(),
        )


@dataclass
class Forecast:
    request_times: np.ndarray   # (R,) horizon offsets, grid units, increasing
    values: np.ndarray          # (R, N, output_dim)


def init_params(input_dim: int, hidden_dim: int = 64, output_dim: int = 1,
                graph: TrafficGraph = None, seed: int = 0,
                delays: DelayTable | None = None,
                tau_max: float = 12.0) -> ModelParams:
    """Seeded uniform init, entries in [-1/sqrt(fan_in), 1/sqrt(fan_in)].

    The spatial ratio starts at the stability boundary 1/K.  Delays come from
    the given table (e.g. MCC estimates) or start at zero.
    """
    if min(input_dim, hidden_dim, output_dim) < 1:
        raise InputError("dimensions must be >= 1")
    if graph is None:
        raise InputError("init_params requires a graph")
    rng = np.random.default_rng(seed)
    h, d_in, d_out = hidden_dim, input_dim, output_dim

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    weights = {
        "hist_w1": uniform((h, d_in), d_in),
        "hist_b1": uniform((h,), d_in),
        "hist_w2": uniform((h, h), h),
        "hist_b2": uniform((h,), h),
        "enc_wz": uniform((h, h), h),
        "enc_uz": uniform((h, h), h),
        "enc_bz": uniform((h,), h),
        "enc_wn": uniform((h, h), h),
        "ctrl_w": uniform((h, d_in), d_in),
        "ctrl_b": uniform((h,), d_in),
        "dec_wz": uniform((h, h), h),
        "dec_uz": uniform((h, h), h),
        "dec_bz": uniform((h,), h),
        "dec_wn": uniform((h, h), h),
        "out_w": uniform((d_out, h), h),
        "out_b": uniform((d_out,), h),
        "c": np.array(1.0 / graph.max_degree),
    }
    if delays is None:
        delays = zero_delay_table(graph, tau_max)
    return ModelParams(
        input_dim=d_in, hidden_dim=h, output_dim=d_out,
        weights=weights, delays=delays.copy(),
    )


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def encode_history(params: ModelParams, window_first_frame) -> HistoryFunction:
    """Constant history phi = affine(tanh(affine(x))) of the first frame.

    Accepts (N, input_dim) or batched (B, N, input_dim); phi doubles as h(0).
    """
    x = np.asarray(window_first_frame, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    w = params.weights
    phi = np.tanh(x @ w["hist_w1"].T + w["hist_b1"]) @ w["hist_w2"].T + w["hist_b2"]
    return HistoryFunction(constant_state=phi[0] if squeeze else phi)


def _encode_history_vjp(params: ModelParams, x, d_phi):
    w = params.weights
    a = x @ w["hist_w1"].T + w["hist_b1"]
    t = np.tanh(a)
    grads = {
        "hist_w2": np.einsum("bnh,bnk->hk", d_phi, t),
        "hist_b2": d_phi.sum(axis=(0, 1)),
    }
    da = (d_phi @ w["hist_w2"]) * (1.0 - t * t)
    grads["hist_w1"] = np.einsum("bnh,bnd->hd", da, x)
    grads["hist_b1"] = da.sum(axis=(0, 1))
    return grads


# ---------------------------------------------------------------------------
# Reference per-node operations (the vectorized dynamics must agree with these)

def update_vector(params: ModelParams, graph: TrafficGraph, delays: DelayTable,
                  state_lookup, node: int, t: float, t_abs=None) -> np.ndarray:
    """g_i(t) = c * sum over in-edges of alpha * Wn h_src(t - tau)."""
    w = params.weights
    peak = delays.is_peak(t_abs)
    tau = delays.values(peak)
    g = np.zeros(params.hidden_dim)
    for e in graph.in_neighbors[node]:
        g += graph.alpha[e] * (w["enc_wn"] @ state_lookup(int(graph.srcs[e]), t - tau[e]))
    return params.c * g


def derivative(params: ModelParams, graph: TrafficGraph, spline: SplinePath,
               state_lookup, node: int, t: float, t_abs=None) -> np.ndarray:
    """Gated controlled derivative of one node's hidden state (input phase)."""
    w = params.weights
    g = update_vector(params, graph, params.delays, state_lookup, node, t, t_abs)
    h = state_lookup(node, t)
    z = _sigmoid(w["enc_wz"] @ h + w["enc_uz"] @ g + w["enc_bz"])
    q = w["ctrl_w"] @ np.atleast_1d(spline.eval_derivative(t, node=node)) + w["ctrl_b"]
    return (1.0 - z) * (g - h) * q


# ---------------------------------------------------------------------------
# Vectorized dynamics and their vector-Jacobian products

class _PhaseOps:
    """Precomputed graph indexing plus the forward/vjp of one phase's dynamics.

    anchors: per-batch window start (minutes of day) or None; grid times are
    converted to absolute minutes for the delay-regime switch.
    """

    def __init__(self, params, graph, prefix, control_deriv=None,
                 anchors=None, interval_minutes=1.0):
        self.w = params.weights
        self.prefix = prefix
        self.table = params.delays
        self.srcs = graph.srcs
        self.dsts = graph.dsts
        self.alpha = graph.alpha
        self.n_nodes = graph.node_count
        self.control_deriv = control_deriv
        self.anchors = anchors
        self.interval = interval_minutes
        e = graph.edge_count
        self.slot_off = np.where(graph.self_loop_mask, -1, np.arange(e))
        self.slot_peak = np.where(graph.self_loop_mask, -1, np.arange(e) + e)
        order = np.argsort(self.dsts, kind="stable")
        self.order = order
        counts = np.bincount(self.dsts, minlength=self.n_nodes)
        self.seg_starts = np.concatenate(([0], np.cumsum(counts)[:-1]))

    def edge_delays(self, t, n_batch):
        """(tau, slots), both (B, E), for grid time t."""
        if self.anchors is None:
            tau = np.broadcast_to(self.table.tau_offpeak, (n_batch, len(self.srcs)))
            slots = np.broadcast_to(self.slot_off, tau.shape)
            return tau, slots
        t_abs = self.anchors + t * self.interval
        peak = np.atleast_1d(self.table.is_peak(t_abs))[:, None]
        tau = np.where(peak, self.table.tau_peak, self.table.tau_offpeak)
        slots = np.where(peak, self.slot_peak, self.slot_off)
        return tau, slots

    def aggregate(self, weighted):
        """Sum (B, E, H) edge contributions into (B, N, H) by destination."""
        srt = weighted[:, self.order, :]
        return np.add.reduceat(srt, self.seg_starts, axis=1)

    def dynamics(self, t, h, reader):
        w, p = self.w, self.prefix
        tau, slots = self.edge_delays(t, h.shape[0])
        vals = reader.gather(t - tau, self.srcs, slots)
        fv = vals @ w[p + "_wn"].T
        gtil = self.aggregate(self.alpha[None, :, None] * fv)
        g = float(w["c"]) * gtil
        z = _sigmoid(h @ w[p + "_wz"].T + g @ w[p + "_uz"].T + w[p + "_bz"])
        out = (1.0 - z) * (g - h)
        if self.control_deriv is not None:
            out = out * (self.control_deriv(t) @ w["ctrl_w"].T + w["ctrl_b"])
        return out

    def vjp(self, t, h, gathered, grad_out):
        w, p = self.w, self.prefix
        vals = gathered[0]
        fv = vals @ w[p + "_wn"].T
        gtil = self.aggregate(self.alpha[None, :, None] * fv)
        c = float(w["c"])
        g = c * gtil
        z = _sigmoid(h @ w[p + "_wz"].T + g @ w[p + "_uz"].T + w[p + "_bz"])
        u = g - h
        grads = {}
        if self.control_deriv is not None:
            xd = self.control_deriv(t)
            q = xd @ w["ctrl_w"].T + w["ctrl_b"]
            dq = grad_out * (1.0 - z) * u
            grads["ctrl_w"] = np.einsum("bnh,bnd->hd", dq, xd)
            grads["ctrl_b"] = dq.sum(axis=(0, 1))
        else:
            q = 1.0
        gq = grad_out * q
        du = gq * (1.0 - z)
        dz_pre = -gq * u * z * (1.0 - z)
        grads[p + "_wz"] = np.einsum("bnh,bnk->hk", dz_pre, h)
        grads[p + "_uz"] = np.einsum("bnh,bnk->hk", dz_pre, g)
        grads[p + "_bz"] = dz_pre.sum(axis=(0, 1))
        d_h = -du + dz_pre @ w[p + "_wz"]
        d_g = du + dz_pre @ w[p + "_uz"]
        grads["c"] = np.array(np.vdot(d_g, gtil))
        d_fv = c * self.alpha[None, :, None] * d_g[:, self.dsts, :]
        grads[p + "_wn"] = np.einsum("beh,bek->hk", d_fv, vals)
        d_vals = d_fv @ w[p + "_wn"]
        return d_h, [d_vals], grads


def _output_readout(params, traj, request_abs):
    w = params.weights
    hs = [traj.state_at(t) for t in request_abs]
    preds = np.stack([h @ w["out_w"].T + w["out_b"] for h in hs], axis=1)
    return hs, preds   # hs: list of (B,N,H); preds: (B,R,N,Dout)


def _decode_batch(params, graph, input_trajectory, offsets, *, eta, anchors,
                  interval_minutes):
    t0 = input_trajectory.t_end
    if offsets[-1] == 0.0:
        _, preds = _output_readout(params, input_trajectory, [t0])
        return preds, None
    ops = _PhaseOps(params, graph, "dec", anchors=anchors,
                    interval_minutes=interval_minutes)
    traj = integrate(
        ops.dynamics, input_trajectory,
        SolverConfig(eta=eta, t_end=t0 + float(offsets[-1]), t_start=t0),
    )
    _, preds = _output_readout(params, traj, t0 + offsets)
    return preds, traj


def decode(params: ModelParams, graph: TrafficGraph, input_trajectory: Trajectory,
           request_times, *, eta: float = 0.25, anchors=None,
           interval_minutes: float = 1.0) -> Forecast:
    """Integrate the control-free output dynamics past the input phase and read
    the output map at the requested horizon offsets (grid units).

    Offsets must be >= 0 and strictly increasing; 0 is the zero-integration
    limit returning the mapped final input state.  Delayed reads that land
    before the input-phase end are served by the input trajectory.
    """
    offsets = np.asarray(request_times, dtype=np.float64)
    if offsets.ndim != 1 or len(offsets) == 0:
        raise InputError("request_times must be a nonempty 1-D sequence")
    if np.any(np.diff(offsets) <= 0):
        raise InputError("request_times must be strictly increasing")
    if offsets[0] < 0:
        raise InputError("request times must not precede the input-phase end")
    if input_trajectory.states.shape[1] != 1:
        raise InputError("decode serves one window at a time")
    preds, _ = _decode_batch(params, graph, input_trajectory, offsets, eta=eta,
                             anchors=anchors, interval_minutes=interval_minutes)
    return Forecast(request_times=offsets, values=preds[0])


def huber_loss(pred, truth, delta: float = 1.0) -> float:
    """Mean Huber loss: quadratic within delta of zero error, linear beyond."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise InputError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if delta <= 0:
        raise InputError("delta must be positive")
    e = truth - pred
    ae = np.abs(e)
    quad = ae <= delta
    vals = np.where(quad, 0.5 * e * e, delta * ae - 0.5 * delta * delta)
    return float(vals.mean())


def _huber_grad_wrt_pred(pred, truth, delta):
    e = truth - pred
    d_e = np.where(np.abs(e) <= delta, e, delta * np.sign(e))
    return -d_e / e.size


class ForwardPlan:
    """Shared setup for forecast and training: spline, history, phase ops."""

    def __init__(self, params, graph, inputs, *, eta, anchors=None,
                 interval_minutes=1.0):
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim == 3:
            inputs = inputs[None]
        self.inputs = inputs                      # (B, T, N, Din)
        b, t_in, n, _ = inputs.shape
        if t_in < 2:
            raise InputError("need at least 2 input frames")
        if n != graph.node_count:
            raise InputError(f"window has {n} nodes, graph has {graph.node_count}")
        self.eta = eta
        self.t_last = float(t_in - 1)
        knots = np.arange(t_in, dtype=np.float64)
        self.path = fit_natural_cubic(knots, inputs.transpose(1, 0, 2, 3))
        self.history = encode_history(params, inputs[:, 0])
        self.enc = _PhaseOps(
            params, graph, "enc",
            control_deriv=self.path.eval_derivative,
            anchors=anchors, interval_minutes=interval_minutes,
        )
        self.params, self.graph = params, graph
        self.anchors, self.interval = anchors, interval_minutes

    def run_input_phase(self) -> Trajectory:
        return integrate(
            self.enc.dynamics, self.history,
            SolverConfig(eta=self.eta, t_end=self.t_last),
        )


def forecast(params: ModelParams, graph: TrafficGraph, window,
             request_times, *, eta: float = 0.25, stats=None) -> Forecast:
    """Full pipeline for one window: standardize, spline-fit, encode the
    history, integrate the input phase, decode at the requested horizon
    offsets, and unstandardize.

    `window` is a FlowSeries (values (T, N)) or a raw (T, N) / (T, N, Din)
    array; `request_times` are offsets past the last observed frame in grid
    units; `stats` (from training.standardize) maps flows to model units.
    """
    values = np.asarray(getattr(window, "values", window), dtype=np.float64)
    if values.ndim == 2:
        values = values[..., None]
    anchors = None
    interval = getattr(window, "interval_minutes", 1.0)
    start = getattr(window, "start_minute_of_day", None)
    if start is not None:
        anchors = np.array([start], dtype=np.float64)
    if stats is not None:
        values = stats.apply(values)
    offsets = np.asarray(request_times, dtype=np.float64)
    if len(offsets) and offsets[0] <= 0:
        raise InputError("forecast request times must be positive offsets")

    plan = ForwardPlan(params, graph, values[None], eta=eta, anchors=anchors,
                       interval_minutes=interval)
    enc_traj = plan.run_input_phase()
    fc = decode(params, graph, enc_traj, offsets, eta=eta,
                anchors=anchors, interval_minutes=interval)
    if stats is not None:
        fc = Forecast(request_times=fc.request_times, values=stats.invert(fc.values))
    return fc


def predict_batch(params: ModelParams, graph: TrafficGraph, inputs,
                  request_times, *, eta: float = 0.25, anchors=None,
                  interval_minutes: float = 1.0) -> np.ndarray:
    """Forward-only batched forecast in model (standardized) units.

    inputs: (B, T, N, Din); returns (B, R, N, out_dim) at the given positive
    horizon offsets.
    """
    offsets = np.asarray(request_times, dtype=np.float64)
    if np.any(offsets <= 0):
        raise InputError("request times must be positive offsets")
    plan = ForwardPlan(params, graph, inputs, eta=eta, anchors=anchors,
                       interval_minutes=interval_minutes)
    enc_traj = plan.run_input_phase()
    preds, _ = _decode_batch(params, graph, enc_traj, offsets, eta=eta,
                             anchors=anchors, interval_minutes=interval_minutes)
    return preds


def loss_and_gradients(params: ModelParams, graph: TrafficGraph, inputs,
                       target_offsets, targets, *, eta: float = 0.25,
                       delta: float = 1.0, anchors=None,
                       interval_minutes: float = 1.0):
    """Huber loss of a batch and its exact gradients.

    inputs: (B, T, N, Din) standardized windows; targets: (B, R, N, Dout)
    standardized truth at `target_offsets` (grid units past the last input
    frame, all > 0).  Returns (loss, grads dict over WEIGHT_KEYS plus
    tau_offpeak / tau_peak, predictions).
    """
    w = params.weights
    offsets = np.asarray(target_offsets, dtype=np.float64)
    if np.any(offsets <= 0):
        raise InputError("target offsets must be positive")
    plan = ForwardPlan(params, graph, inputs, eta=eta, anchors=anchors,
                       interval_minutes=interval_minutes)
    enc_traj = plan.run_input_phase()
    dec_ops = _PhaseOps(params, graph, "dec", anchors=anchors,
                        interval_minutes=interval_minutes)
    t0 = enc_traj.t_end
    dec_traj = integrate(
        dec_ops.dynamics, enc_traj,
        SolverConfig(eta=eta, t_end=t0 + float(offsets[-1]), t_start=t0),
    )
    request_abs = t0 + offsets
    hs, preds = _output_readout(params, dec_traj, request_abs)

    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != preds.shape:
        raise InputError(f"target shape {targets.shape} != {preds.shape}")
    loss = huber_loss(preds, targets, delta)
    d_pred = _huber_grad_wrt_pred(preds, targets, delta)

    grads = {k: np.zeros_like(v) for k, v in w.items()}
    seeds = []
    for r, t_req in enumerate(request_abs):
        dp = d_pred[:, r]
        grads["out_w"] += np.einsum("bnd,bnh->dh", dp, hs[r])
        grads["out_b"] += dp.sum(axis=(0, 1))
        seeds.append((float(t_req), dp @ w["out_w"]))

    n_slots = 2 * graph.edge_count
    dec_res = backward(dec_traj, dec_ops.vjp, state_seeds=seeds, n_tau_slots=n_slots)
    enc_res = backward(enc_traj, plan.enc.vjp,
                       grid_seed=dec_res.parent_grid_grad, n_tau_slots=n_slots)
    for res in (dec_res, enc_res):
        for name, g in res.param_grads.items():
            grads[name] += g

    d_phi = enc_res.history_grad + dec_res.history_grad
    for name, g in _encode_history_vjp(params, plan.inputs[:, 0], d_phi).items():
        grads[name] += g

    tau = dec_res.tau_grad + enc_res.tau_grad
    e = graph.edge_count
    grads["tau_offpeak"] = tau[:e]
    grads["tau_peak"] = tau[e:]
    return loss, grads, preds
