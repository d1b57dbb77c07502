"""Stability certification for the model's linear multi-delay envelope.

The gated dynamics are bounded by linear multi-delay systems
dH/dt = A0 H(t) + sum_k Ak H(t - tau_k) with A0 = -I and each Ak holding at
most one entry c*alpha per destination row (self-loops fold into the -H
term).  Logarithmic norms give the sufficient condition
mu(A0) + sum_k ||Ak|| <= 0, which the row normalization reduces to the
coarse bound c <= 1/K.  Only pointwise characteristic-equation evaluation is
provided, no root finding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .delays import DelayTable
from .errors import InputError
from .graph import TrafficGraph
from .solver import HistoryFunction, SolverConfig, integrate

__all__ = [
    "EnvelopeSystem",
    "StabilityReport",
    "log_norm",
    "induced_norm",
    "build_envelope",
    "check_stability",
    "characteristic_value",
    "simulate_envelope",
    "format_report",
]

_MAX_DENSE = 64


def log_norm(a, p) -> float:
    """Logarithmic norm mu_p for p in {1, 2, inf} (closed forms; symmetric
    eigensolve for p=2)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InputError("log_norm needs a square matrix")
    if not np.all(np.isfinite(a)):
        raise InputError("matrix entries must be finite")
    d = np.diag(a)
    off = np.abs(a) - np.diag(np.abs(d))
    if p == 1:
        return float(np.max(d + off.sum(axis=0)))
    if p == np.inf or p == "inf":
        return float(np.max(d + off.sum(axis=1)))
    if p == 2:
        return float(0.5 * np.linalg.eigvalsh(a + a.T).max())
    raise InputError(f"unsupported norm order {p!r}")


def induced_norm(a, p) -> float:
    a = np.asarray(a, dtype=np.float64)
    if p == 1:
        return float(np.abs(a).sum(axis=0).max())
    if p == np.inf or p == "inf":
        return float(np.abs(a).sum(axis=1).max())
    if p == 2:
        return float(np.linalg.norm(a, 2))
    raise InputError(f"unsupported norm order {p!r}")


@dataclass
class EnvelopeSystem:
    """A0 = -I plus K delay matrices with at most one nonzero per row.

    tau_groups[k][i] is the delay for row i of Ak (0 where the row is empty);
    the flat edge arrays mirror the packing for simulation.
    """

    a0: np.ndarray
    ak_list: list
    tau_groups: list
    c: float
    max_degree: int            # K of the underlying graph (self-loop included)
    edge_rows: np.ndarray      # (M,) destination rows over all packed entries
    edge_cols: np.ndarray      # (M,) source columns
    edge_coeffs: np.ndarray    # (M,) c * alpha values
    edge_taus: np.ndarray      # (M,) delays

    @property
    def n(self) -> int:
        return self.a0.shape[0]


@dataclass
class StabilityReport:
    mu_a0: float
    ak_norm_sum: float
    margin: float
    sufficient_stable: bool
    c_bound: float
    c_actual: float


def build_envelope(graph: TrafficGraph, c: float, delays: DelayTable,
                   regime: str = "offpeak") -> EnvelopeSystem:
    """Pack non-self-loop edges greedily per destination row into K matrices,
    entry value c * alpha with the matching regime delay."""
    if c <= 0:
        raise InputError("c must be positive")
    if regime not in ("peak", "offpeak"):
        raise InputError(f"unknown regime {regime!r}")
    tau_all = delays.tau_peak if regime == "peak" else delays.tau_offpeak
    n = graph.node_count

    slots: list[dict] = []
    rows, cols, coeffs, taus = [], [], [], []
    for node in range(n):
        k = 0
        for e in graph.in_neighbors[node]:
            if graph.self_loop_mask[e]:
                continue
            while k >= len(slots):
                slots.append({"rows": [], "cols": [], "vals": [], "taus": []})
            s = slots[k]
            s["rows"].append(node)
            s["cols"].append(int(graph.srcs[e]))
            s["vals"].append(c * float(graph.alpha[e]))
            s["taus"].append(float(tau_all[e]))
            rows.append(node)
            cols.append(int(graph.srcs[e]))
            coeffs.append(c * float(graph.alpha[e]))
            taus.append(float(tau_all[e]))
            k += 1

    ak_list, tau_groups = [], []
    for s in slots:
        ak = np.zeros((n, n))
        ak[s["rows"], s["cols"]] = s["vals"]
        tg = np.zeros(n)
        tg[s["rows"]] = s["taus"]
        ak_list.append(ak)
        tau_groups.append(tg)

    return EnvelopeSystem(
        a0=-np.eye(n),
        ak_list=ak_list,
        tau_groups=tau_groups,
        c=float(c),
        max_degree=graph.max_degree,
        edge_rows=np.array(rows, dtype=np.int64),
        edge_cols=np.array(cols, dtype=np.int64),
        edge_coeffs=np.array(coeffs, dtype=np.float64),
        edge_taus=np.array(taus, dtype=np.float64),
    )


def check_stability(env: EnvelopeSystem, p=np.inf) -> StabilityReport:
    """Sufficient test mu_p(A0) + sum_k ||Ak||_p <= 0, with the coarse
    c <= 1/K bound reported alongside."""
    mu = log_norm(env.a0, p)
    total = sum(induced_norm(ak, p) for ak in env.ak_list)
    margin = mu + total
    return StabilityReport(
        mu_a0=mu,
        ak_norm_sum=total,
        margin=margin,
        sufficient_stable=margin <= 0,
        c_bound=1.0 / env.max_degree,
        c_actual=env.c,
    )


def characteristic_value(env: EnvelopeSystem, z: complex) -> complex:
    """det[zI - A0 - sum_k Ak scaled entrywise by exp(-z tau)].

    Each packed row has a single entry, so its delay factor scales that row.
    Dense evaluation is capped at 64 nodes.
    """
    n = env.n
    if n > _MAX_DENSE:
        raise InputError(f"characteristic evaluation capped at {_MAX_DENSE} nodes")
    z = complex(z)
    m = z * np.eye(n, dtype=complex) - env.a0.astype(complex)
    for ak, taus in zip(env.ak_list, env.tau_groups):
        m -= ak * np.exp(-z * taus)[:, None]
    return complex(np.linalg.det(m))


def simulate_envelope(env: EnvelopeSystem, history_vec, eta: float,
                      t_end: float):
    """Integrate the envelope system from a constant history; returns the
    (S+1, n) state record.  Used by the empirical contraction check."""
    h0 = np.asarray(history_vec, dtype=np.float64).reshape(1, env.n, 1)
    a0 = env.a0
    rows, cols = env.edge_rows, env.edge_cols
    coeffs, taus = env.edge_coeffs, env.edge_taus

    def dyn(t, h, reader):
        out = np.einsum("ij,bjh->bih", a0, h)
        if len(rows):
            vals = reader.gather(t - taus, cols)[0, :, 0]
            out[0, :, 0] += np.bincount(rows, weights=coeffs * vals, minlength=env.n)
        return out

    traj = integrate(dyn, HistoryFunction(h0), SolverConfig(eta=eta, t_end=t_end))
    return traj.states[:, 0, :, 0]


def format_report(report: StabilityReport, as_kv: bool = False) -> str:
    if as_kv:
        return "\n".join(
            [
                f"mu_a0={report.mu_a0!r}",
                f"ak_norm_sum={report.ak_norm_sum!r}",
                f"margin={report.margin!r}",
                f"sufficient_stable={report.sufficient_stable}",
                f"c_bound={report.c_bound!r}",
                f"c_actual={report.c_actual!r}",
            ]
        )
    flag = "yes" if report.sufficient_stable else "no"
    return "\n".join(
        [
            f"log norm mu(A0)      : {report.mu_a0: .6f}",
            f"sum of ||Ak||        : {report.ak_norm_sum: .6f}",
            f"margin               : {report.margin: .6f}",
            f"sufficient stability : {flag}",
            f"c bound (1/K)        : {report.c_bound: .6f}",
            f"c actual             : {report.c_actual: .6f}",
        ]
    )
