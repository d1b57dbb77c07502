"""Explicit-Euler integration of delay differential equations and its exact
reverse-mode gradient.

States are (batch, node, hidden) arrays on a uniform time grid (the final step
may be shortened when the step does not divide the horizon).  Delayed reads
h(t - tau) interpolate linearly between the bracketing grid states; for t at
or below the start they fall through to the history, which is either a
constant vector or another (earlier) Trajectory, so an output-phase
integration can read back into the input phase.

Gradients are discretize-then-optimize: `backward` sweeps the recorded Euler
steps in reverse and differentiates the exact discrete map.  Each delayed
lookup routes gradient mass to its two bracketing grid states through the
interpolation weights, and contributes (incoming gradient) . (-dh/dt at the
lookup) to its delay parameter, using the stored forward derivative of the
segment that served the read.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import DivergenceError, InputError, RangeError

__all__ = [
    "HistoryFunction",
    "SolverConfig",
    "Trajectory",
    "BackwardResult",
    "integrate",
    "backward",
    "state_at",
    "delay_partial",
]

_TOL = 1e-9


@dataclass
class HistoryFunction:
    """Time-constant history: defined for every t at or before the start."""

    constant_state: np.ndarray  # (B, N, H)


@dataclass(frozen=True)
class SolverConfig:
    eta: float
    t_end: float
    t_start: float = 0.0

    def __post_init__(self):
        if self.eta <= 0:
            raise InputError("eta must be positive")
        if self.t_end <= self.t_start:
            raise InputError("t_end must exceed t_start")

    def grid(self) -> np.ndarray:
        n_full = int(np.floor((self.t_end - self.t_start) / self.eta + _TOL))
        times = self.t_start + self.eta * np.arange(n_full + 1, dtype=np.float64)
        if self.t_end - times[-1] > _TOL * max(1.0, self.eta):
            times = np.append(times, self.t_end)  # shortened final step
        else:
            times[-1] = self.t_end
        return times


class GatherRecord(NamedTuple):
    """One delayed-read call made by the dynamics at a given step (flattened)."""

    times: np.ndarray   # (B*M,)
    batch: np.ndarray   # (B*M,)
    nodes: np.ndarray   # (B*M,)
    slots: np.ndarray   # (B*M,) delay-parameter slots, -1 where not learnable
    n_batch: int
    n_slots_per_batch: int


@dataclass
class Trajectory:
    """Dense record of one integration: grid times, states, and derivatives.

    states[k+1] = states[k] + (times[k+1]-times[k]) * derivs[k] by
    construction; derivs[-1] is the dynamics evaluated at the endpoint.
    """

    times: np.ndarray                   # (S+1,)
    states: np.ndarray                  # (S+1, B, N, H)
    derivs: np.ndarray                  # (S+1, B, N, H)
    history: "HistoryFunction | Trajectory"
    records: list = field(default_factory=list, repr=False)  # per step: [GatherRecord]
    built: int = 0                      # index of the last valid state row

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def state_at(self, t: float, node=None):
        """State at time t: history for t below start, else linear interpolation
        between bracketing grid states (exact at grid points)."""
        out = _gather_full(self, float(t), self.built)
        return out if node is None else out[:, node]

    def delay_partial(self, t: float, node=None):
        """-dh/dt at the lookup time: the stored derivative at a grid point,
        the active segment's stored slope between points, zero in the
        constant-history region."""
        out = -_slope_full(self, float(t), exact_at_knots=True)
        return out if node is None else out[:, node]


def state_at(traj: Trajectory, t: float, node=None):
    return traj.state_at(t, node)


def delay_partial(traj: Trajectory, t: float, node=None):
    return traj.delay_partial(t, node)


class Reader:
    """Causal access to the partially built trajectory during one step."""

    def __init__(self, traj: Trajectory, t_now: float, record_to=None):
        self._traj = traj
        self._t_now = t_now
        self._records = record_to

    def gather(self, times, nodes, tau_slots=None) -> np.ndarray:
        """Delayed reads h_{nodes[m]}(times[.., m]) -> (B, M, H).

        `times` is (M,) shared across the batch or (B, M); `tau_slots`
        likewise, holding delay-parameter indices (-1 = none).
        """
        b = self._traj.states.shape[1]
        tsf, bf, nf, sf, m = _flatten_lookup(times, nodes, tau_slots, b)
        if np.any(tsf > self._t_now + _TOL):
            raise RangeError(
                f"causality violation: lookup beyond current step time {self._t_now}"
            )
        vals = _gather_flat(self._traj, tsf, bf, nf, self._traj.built)
        if self._records is not None:
            self._records.append(GatherRecord(tsf, bf, nf, sf, b, m))
        return vals.reshape(b, m, -1)

    def state_at(self, t: float, node=None):
        if t > self._t_now + _TOL:
            raise RangeError(
                f"causality violation: lookup beyond current step time {self._t_now}"
            )
        return self._traj.state_at(t, node)


def integrate(dynamics: Callable, history, config: SolverConfig) -> Trajectory:
    """Explicit Euler over config's grid.

    `dynamics(t, state, reader) -> dstate/dt` may call reader.gather for
    delayed reads (all delays nonnegative, so only past values are visible).
    The derivative at every grid point is stored, the endpoint included, for
    later delayed-gradient evaluation.  Raises DivergenceError naming the
    step if the state leaves the finite range.
    """
    times = config.grid()
    n_steps = len(times) - 1
    if isinstance(history, Trajectory):
        state0 = history.state_at(config.t_start)
    else:
        state0 = np.asarray(history.constant_state, dtype=np.float64)
        if state0.ndim != 3:
            raise InputError("history constant must be (batch, node, hidden)")
    states = np.zeros((n_steps + 1,) + state0.shape)
    derivs = np.zeros_like(states)
    states[0] = state0
    traj = Trajectory(times=times, states=states, derivs=derivs, history=history)

    for k in range(n_steps + 1):
        step_records: list = []
        reader = Reader(traj, float(times[k]), record_to=step_records)
        d = dynamics(float(times[k]), states[k], reader)
        derivs[k] = d
        traj.records.append(step_records)
        if k < n_steps:
            states[k + 1] = states[k] + (times[k + 1] - times[k]) * d
            if not np.all(np.isfinite(states[k + 1])):
                raise DivergenceError(
                    f"non-finite state after step {k} (t={times[k + 1]:g})"
                )
            traj.built = k + 1
    return traj


@dataclass
class BackwardResult:
    param_grads: dict                       # accumulated vjp parameter grads
    tau_grad: np.ndarray                    # (n_tau_slots,)
    history_grad: np.ndarray | None         # grad wrt the root constant history
    parent_grid_grad: np.ndarray | None     # grad wrt parent trajectory states


def backward(traj: Trajectory, dynamics_vjp: Callable, *, state_seeds=(),
             grid_seed=None, n_tau_slots: int = 0) -> BackwardResult:
    """Reverse sweep over the recorded Euler steps.

    `state_seeds` is a sequence of (t, grad) pairs giving the loss gradient
    with respect to interpolated states read from this trajectory;
    `grid_seed`, when given, is a full (S+1, B, N, H) array of direct grid
    gradients (used to chain a later phase's backward into this one).

    `dynamics_vjp(t, state, gathered, grad_deriv)` must return
    (d_state, d_gathered_list, param_grad_dict) for the local step map, where
    `gathered` is the list of (B, M, H) value arrays the forward read, in
    call order.
    """
    times, states, derivs = traj.times, traj.states, traj.derivs
    n_steps = len(times) - 1
    sinks = {id(traj): np.zeros_like(states)}
    _alloc_sinks(traj.history, sinks)
    tau_grad = np.zeros(n_tau_slots)
    param_grads: dict = {}
    g_states = sinks[id(traj)]

    for t, g in state_seeds:
        _seed_state_grad(traj, float(t), g, g_states)
    if grid_seed is not None:
        g_states += grid_seed

    for k in range(n_steps - 1, -1, -1):
        g_next = g_states[k + 1]
        if not np.any(g_next):
            continue
        g_states[k] += g_next
        grad_deriv = (times[k + 1] - times[k]) * g_next
        recs = traj.records[k]
        gathered = [
            _gather_flat(traj, r.times, r.batch, r.nodes, n_steps)
            .reshape(r.n_batch, r.n_slots_per_batch, -1)
            for r in recs
        ]
        d_state, d_gathered, pgrads = dynamics_vjp(
            float(times[k]), states[k], gathered, grad_deriv
        )
        g_states[k] += d_state
        for name, g in pgrads.items():
            if name in param_grads:
                param_grads[name] += g
            else:
                param_grads[name] = np.array(g, dtype=np.float64)
        for r, dv in zip(recs, d_gathered):
            _scatter_flat(
                traj, r.times, r.batch, r.nodes, r.slots,
                dv.reshape(-1, dv.shape[-1]), sinks, tau_grad,
            )

    # h(t_start) is the history value, so its gradient folds into the chain.
    g0 = g_states[0]
    if np.any(g0):
        _scatter_history(traj.history, np.full(1, traj.t_start), g0, sinks, tau_grad)

    hist = traj.history
    parent_grid = sinks[id(hist)] if isinstance(hist, Trajectory) else None
    root = _root_history(traj)
    return BackwardResult(
        param_grads=param_grads,
        tau_grad=tau_grad,
        history_grad=sinks.get(id(root)),
        parent_grid_grad=parent_grid,
    )


def _root_history(traj: Trajectory) -> HistoryFunction:
    h = traj.history
    while isinstance(h, Trajectory):
        h = h.history
    return h


def _alloc_sinks(history, sinks: dict):
    if isinstance(history, Trajectory):
        sinks[id(history)] = np.zeros_like(history.states)
        _alloc_sinks(history.history, sinks)
    else:
        sinks[id(history)] = np.zeros_like(history.constant_state)


def _flatten_lookup(times, nodes, tau_slots, n_batch):
    times = np.asarray(times, dtype=np.float64)
    nodes = np.asarray(nodes, dtype=np.int64)
    m = nodes.shape[0]
    if times.ndim == 1:
        tsf = np.tile(times, n_batch)
    else:
        tsf = np.ascontiguousarray(times).ravel()
    nf = np.tile(nodes, n_batch)
    bf = np.repeat(np.arange(n_batch), m)
    if tau_slots is None:
        sf = np.full(n_batch * m, -1, dtype=np.int64)
    else:
        tau_slots = np.asarray(tau_slots, dtype=np.int64)
        sf = (
            np.tile(tau_slots, n_batch)
            if tau_slots.ndim == 1
            else np.ascontiguousarray(tau_slots).ravel()
        )
    return tsf, bf, nf, sf, m


def _resolve(traj: Trajectory, ts):
    """Bracket index and interpolation weight per lookup (own-grid entries)."""
    times = traj.times
    idx = np.clip(np.searchsorted(times, ts, side="right") - 1, 0, len(times) - 2)
    w = (ts - times[idx]) / (times[idx + 1] - times[idx])
    return idx, w


def _gather_flat(traj: Trajectory, tsf, bf, nf, built):
    out = np.empty((len(tsf), traj.states.shape[-1]))
    own = tsf >= traj.t_start - _TOL
    if own.any():
        to = tsf[own]
        if np.any(to > traj.times[built] + _TOL):
            raise RangeError("lookup beyond the integrated range")
        idx, w = _resolve(traj, to)
        w = w[:, None]
        bo, no = bf[own], nf[own]
        out[own] = (1.0 - w) * traj.states[idx, bo, no] + w * traj.states[
            idx + 1, bo, no
        ]
    rest = ~own
    if rest.any():
        h = traj.history
        if isinstance(h, Trajectory):
            out[rest] = _gather_flat(h, tsf[rest], bf[rest], nf[rest], h.built)
        else:
            out[rest] = h.constant_state[bf[rest], nf[rest]]
    return out


def _gather_full(traj: Trajectory, t: float, built):
    if t >= traj.t_start - _TOL:
        if t > traj.times[built] + _TOL:
            raise RangeError(f"time {t} beyond the integrated range")
        idx, w = _resolve(traj, np.asarray(t))
        return (1.0 - w) * traj.states[idx] + w * traj.states[idx + 1]
    h = traj.history
    if isinstance(h, Trajectory):
        return _gather_full(h, t, h.built)
    return np.array(h.constant_state, copy=True)


def _slope_full(traj: Trajectory, t: float, exact_at_knots=False):
    if t >= traj.t_start - _TOL:
        if t > traj.t_end + _TOL:
            raise RangeError(f"time {t} beyond the integrated range")
        if exact_at_knots:
            near = np.argmin(np.abs(traj.times - t))
            if abs(traj.times[near] - t) <= _TOL:
                return np.array(traj.derivs[near], copy=True)
        idx, _ = _resolve(traj, np.asarray(t))
        return np.array(traj.derivs[idx], copy=True)
    h = traj.history
    if isinstance(h, Trajectory):
        return _slope_full(h, t, exact_at_knots)
    return np.zeros_like(h.constant_state)


def _seed_state_grad(traj: Trajectory, t: float, g, g_states):
    if not traj.t_start - _TOL <= t <= traj.t_end + _TOL:
        raise InputError(f"seed time {t} outside trajectory range")
    idx, w = _resolve(traj, np.asarray(t))
    g_states[idx] += (1.0 - w) * g
    g_states[idx + 1] += w * g


def _scatter_flat(traj: Trajectory, tsf, bf, nf, sf, g, sinks, tau_grad):
    """Route lookup gradients to bracketing states / history, and delay slots."""
    own = tsf >= traj.t_start - _TOL
    if own.any():
        to = tsf[own]
        idx, w = _resolve(traj, to)
        bo, no = bf[own], nf[own]
        go = g[own]
        wc = w[:, None]
        arr = sinks[id(traj)]
        np.add.at(arr, (idx, bo, no), (1.0 - wc) * go)
        np.add.at(arr, (idx + 1, bo, no), wc * go)
        so = sf[own]
        learn = so >= 0
        if learn.any():
            slopes = traj.derivs[idx[learn], bo[learn], no[learn]]
            contrib = -np.sum(go[learn] * slopes, axis=-1)
            np.add.at(tau_grad, so[learn], contrib)
    rest = ~own
    if rest.any():
        h = traj.history
        if isinstance(h, Trajectory):
            _scatter_flat(h, tsf[rest], bf[rest], nf[rest], sf[rest], g[rest],
                          sinks, tau_grad)
        else:
            np.add.at(sinks[id(h)], (bf[rest], nf[rest]), g[rest])
            # constant history: zero time-derivative, no delay gradient


def _scatter_history(history, t0, g0, sinks, tau_grad):
    """Fold the initial-state gradient into the history chain."""
    if isinstance(history, Trajectory):
        b, n, _ = g0.shape
        tsf = np.repeat(t0, b * n)
        bf = np.repeat(np.arange(b), n)
        nf = np.tile(np.arange(n), b)
        sf = np.full(b * n, -1, dtype=np.int64)
        _scatter_flat(history, tsf, bf, nf, sf, g0.reshape(b * n, -1), sinks, tau_grad)
    else:
        sinks[id(history)] += g0
