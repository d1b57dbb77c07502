"""Per-edge propagation delays.

Two sources: a max-cross-correlation (MCC) preprocessing estimator that picks
the shift maximizing Pearson correlation between neighboring flow series, and
a learnable two-regime table (peak / off-peak hours) updated by gradient
descent.  Delays are stored in continuous grid units; self-loop entries are
pinned to zero.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import InputError
from .graph import TrafficGraph
from .spline import fit_natural_cubic

__all__ = [
    "DEFAULT_PEAK_WINDOWS",
    "DelayTable",
    "LagEstimate",
    "estimate_delay_mcc",
    "estimate_all_delays",
    "delay_lookup",
    "project_delays",
    "zero_delay_table",
    "save_delays_csv",
    "load_delays_csv",
]

# Rush-hour defaults, minutes of day: 07:00-09:00 and 17:00-19:00.
DEFAULT_PEAK_WINDOWS = ((420.0, 540.0), (1020.0, 1140.0))

_MIN_OVERLAP = 8


class LagEstimate(NamedTuple):
    lag: float
    degenerate: bool


@dataclass
class DelayTable:
    """Two-regime delay values, index-aligned with a graph's edge arrays."""

    tau_offpeak: np.ndarray       # (E,) grid units
    tau_peak: np.ndarray          # (E,)
    peak_windows: tuple = DEFAULT_PEAK_WINDOWS
    learnable: bool = False
    tau_max: float = 12.0
    self_loop_mask: np.ndarray = None   # (E,) bool
    degenerate: np.ndarray = None       # (E,) bool, MCC degenerate-input flags

    @property
    def edge_count(self) -> int:
        return len(self.tau_offpeak)

    def is_peak(self, t_abs):
        """Peak-regime membership for absolute time(s) in minutes; None -> off-peak."""
        if t_abs is None:
            return False
        tod = np.asarray(t_abs, dtype=np.float64) % 1440.0
        hit = np.zeros_like(tod, dtype=bool)
        for lo, hi in self.peak_windows:
            hit |= (tod >= lo) & (tod < hi)
        return bool(hit) if hit.ndim == 0 else hit

    def values(self, peak):
        """Per-edge delay vector for a regime mask (bool scalar or array)."""
        if np.ndim(peak) == 0:
            return self.tau_peak if peak else self.tau_offpeak
        return np.where(peak, self.tau_peak, self.tau_offpeak)

    def copy(self) -> "DelayTable":
        return replace(
            self,
            tau_offpeak=self.tau_offpeak.copy(),
            tau_peak=self.tau_peak.copy(),
        )


def zero_delay_table(graph: TrafficGraph, tau_max: float,
                     peak_windows=DEFAULT_PEAK_WINDOWS,
                     learnable: bool = False) -> DelayTable:
    e = graph.edge_count
    return DelayTable(
        tau_offpeak=np.zeros(e),
        tau_peak=np.zeros(e),
        peak_windows=tuple(peak_windows),
        learnable=learnable,
        tau_max=float(tau_max),
        self_loop_mask=graph.self_loop_mask.copy(),
    )


def _pearson(a, b):
    """Population Pearson correlation; None when either side is flat."""
    va = np.var(a)
    vb = np.var(b)
    tiny = 1e-24 * max(1.0, float(np.mean(a)) ** 2 + float(np.mean(b)) ** 2)
    if va <= tiny or vb <= tiny:
        return None
    cov = np.mean((a - np.mean(a)) * (b - np.mean(b)))
    return cov / np.sqrt(va * vb)


def estimate_delay_mcc(x_src, x_dst, max_shift: int, *, resample: int = 1) -> LagEstimate:
    """Delay from src to dst as the argmax-correlation shift in [0, max_shift].

    Shifting src forward by k aligns pairs (x_src[t-k], x_dst[t]) over the
    overlap t in [k, L); ties break toward the smallest k.  A zero-variance
    overlap on either side yields lag 0 with the degenerate flag set.
    `resample` > 1 refines both series onto a spline-interpolated sub-grid,
    enabling fractional-lag search; the returned lag stays in original grid
    units.
    """
    x_src = np.asarray(x_src, dtype=np.float64)
    x_dst = np.asarray(x_dst, dtype=np.float64)
    if x_src.shape != x_dst.shape or x_src.ndim != 1:
        raise InputError("series must be 1-D and the same length")
    if max_shift < 0:
        raise InputError("max_shift must be nonnegative")
    if len(x_src) < max_shift + _MIN_OVERLAP:
        raise InputError(
            f"series length {len(x_src)} too short for max_shift {max_shift}"
        )

    if resample > 1:
        coarse = np.arange(len(x_src), dtype=np.float64)
        fine = np.arange((len(x_src) - 1) * resample + 1) / resample
        x_src = fit_natural_cubic(coarse, x_src).eval(fine)
        x_dst = fit_natural_cubic(coarse, x_dst).eval(fine)
        max_shift = max_shift * resample

    length = len(x_src)
    best_k, best_corr = 0, -np.inf
    for k in range(max_shift + 1):
        corr = _pearson(x_src[: length - k], x_dst[k:])
        if corr is None:
            return LagEstimate(0.0, True)
        if corr > best_corr:
            best_k, best_corr = k, corr
    return LagEstimate(best_k / resample, False)


def _masked_mcc(x_src, x_dst, max_shift, mask):
    """MCC restricted to destination indices where mask holds.

    Falls back to the full-series estimate when some shift has too few pairs.
    """
    idx_all = np.nonzero(mask)[0]
    best_k, best_corr = 0, -np.inf
    for k in range(max_shift + 1):
        idx = idx_all[idx_all >= k]
        if len(idx) < _MIN_OVERLAP:
            return estimate_delay_mcc(x_src, x_dst, max_shift)
        corr = _pearson(x_src[idx - k], x_dst[idx])
        if corr is None:
            return LagEstimate(0.0, True)
        if corr > best_corr:
            best_k, best_corr = k, corr
    return LagEstimate(float(best_k), False)


def estimate_all_delays(flows, graph: TrafficGraph, max_shift: int,
                        peak_windows=DEFAULT_PEAK_WINDOWS,
                        tau_max: float | None = None,
                        learnable: bool = False) -> DelayTable:
    """MCC estimates for every edge, separately per time-of-day regime.

    `flows` needs `.values` (T x N), `.interval_minutes`, and
    `.start_minute_of_day` (None means no time-of-day: both regimes then share
    the full-series estimate).  Self-loops get 0.  Edges are independent;
    STDDE_THREADS > 1 estimates them in a thread pool.
    """
    values = np.asarray(flows.values, dtype=np.float64)
    if values.shape[0] < 2 * max_shift:
        raise InputError(
            f"need at least {2 * max_shift} steps to estimate delays, got {values.shape[0]}"
        )
    table = zero_delay_table(
        graph, max_shift if tau_max is None else tau_max, peak_windows, learnable
    )
    table.degenerate = np.zeros(graph.edge_count, dtype=bool)

    start_mod = getattr(flows, "start_minute_of_day", None)
    if start_mod is not None:
        tod = (start_mod + np.arange(values.shape[0]) * flows.interval_minutes) % 1440.0
        peak_mask = np.zeros(values.shape[0], dtype=bool)
        for lo, hi in peak_windows:
            peak_mask |= (tod >= lo) & (tod < hi)
    else:
        peak_mask = None

    def estimate_edge(e):
        src, dst = int(graph.srcs[e]), int(graph.dsts[e])
        x_src, x_dst = values[:, src], values[:, dst]
        if peak_mask is None:
            off = estimate_delay_mcc(x_src, x_dst, max_shift)
            return e, off, off
        off = _masked_mcc(x_src, x_dst, max_shift, ~peak_mask)
        peak = _masked_mcc(x_src, x_dst, max_shift, peak_mask)
        return e, off, peak

    non_loops = [e for e in range(graph.edge_count) if not graph.self_loop_mask[e]]
    threads = int(os.environ.get("STDDE_THREADS", "1"))
    if threads > 1 and non_loops:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(estimate_edge, non_loops))
    else:
        results = [estimate_edge(e) for e in non_loops]

    for e, off, peak in results:
        table.tau_offpeak[e] = off.lag
        table.tau_peak[e] = peak.lag
        table.degenerate[e] = off.degenerate or peak.degenerate
    return project_delays(table)


def delay_lookup(table: DelayTable, edge: int, t_abs) -> float:
    """Delay of one edge at an absolute time (minutes); regime-dependent."""
    if not 0 <= edge < table.edge_count:
        raise InputError(f"unknown edge index {edge}")
    if table.is_peak(t_abs):
        return float(table.tau_peak[edge])
    return float(table.tau_offpeak[edge])


def project_delays(table: DelayTable) -> DelayTable:
    """Clamp every entry into [0, tau_max] and reset self-loops to 0."""
    out = table.copy()
    np.clip(out.tau_offpeak, 0.0, out.tau_max, out=out.tau_offpeak)
    np.clip(out.tau_peak, 0.0, out.tau_max, out=out.tau_peak)
    if out.self_loop_mask is not None:
        out.tau_offpeak[out.self_loop_mask] = 0.0
        out.tau_peak[out.self_loop_mask] = 0.0
    return out


def save_delays_csv(table: DelayTable, graph: TrafficGraph, path):
    """Write `src,dst,tau_offpeak,tau_peak` per edge, 6 decimal places."""
    with open(path, "w") as fh:
        for e in range(graph.edge_count):
            fh.write(
                f"{int(graph.srcs[e])},{int(graph.dsts[e])},"
                f"{table.tau_offpeak[e]:.6f},{table.tau_peak[e]:.6f}\n"
            )


def load_delays_csv(path, graph: TrafficGraph, peak_windows=DEFAULT_PEAK_WINDOWS,
                    tau_max: float = 12.0, learnable: bool = False) -> DelayTable:
    """Read a delay CSV back onto a graph's edge indexing."""
    table = zero_delay_table(graph, tau_max, peak_windows, learnable)
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise InputError(f"delay CSV line {line_no}: expected 4 fields")
            e = graph.edge_index(int(parts[0]), int(parts[1]))
            table.tau_offpeak[e] = float(parts[2])
            table.tau_peak[e] = float(parts[3])
    return project_delays(table)
