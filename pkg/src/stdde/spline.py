"""Natural cubic spline interpolation of observed flows.

The spline provides the continuous control path X(t) and its derivative
dX/dt that modulates the hidden dynamics.  Fitting solves the standard
tridiagonal system for knot second derivatives with natural boundary
conditions (zero curvature at both ends) via the Thomas algorithm, O(n) per
column.  Values may carry arbitrary trailing dimensions (node, feature, or
batch axes); each column is fit independently.

No extrapolation: evaluation outside the knot range raises RangeError.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, RangeError

__all__ = ["SplinePath", "fit_natural_cubic"]

_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class SplinePath:
    """Piecewise cubic interpolant through the knots.

    segment_coeffs[i] holds (d, c, b, a) for segment [t_i, t_{i+1}]:
    S(t_i + u) = d + c*u + b*u^2 + a*u^3.
    """

    knot_times: np.ndarray      # (n,)
    knot_values: np.ndarray     # (n, *rest)
    segment_coeffs: np.ndarray  # (n-1, 4, *rest)

    @property
    def t_min(self) -> float:
        return float(self.knot_times[0])

    @property
    def t_max(self) -> float:
        return float(self.knot_times[-1])

    def _locate(self, t):
        t = np.asarray(t, dtype=np.float64)
        span = self.t_max - self.t_min
        tol = _EDGE_TOL * max(1.0, abs(span))
        if np.any(t < self.t_min - tol) or np.any(t > self.t_max + tol):
            raise RangeError(
                f"evaluation time outside knot range [{self.t_min}, {self.t_max}]"
            )
        tc = np.clip(t, self.t_min, self.t_max)
        idx = np.searchsorted(self.knot_times, tc, side="right") - 1
        idx = np.clip(idx, 0, len(self.knot_times) - 2)
        return idx, tc - self.knot_times[idx]

    def _eval(self, t, powers, node):
        idx, u = self._locate(t)
        d, c, b, a = (self.segment_coeffs[idx, j] for j in range(4))
        scalar = u.ndim == 0
        if not scalar:
            u = u.reshape(u.shape + (1,) * (d.ndim - u.ndim))
        if powers == 0:
            out = d + u * (c + u * (b + u * a))
        elif powers == 1:
            out = c + u * (2.0 * b + 3.0 * u * a)
        else:
            out = 2.0 * b + 6.0 * u * a
        if node is not None:
            out = out[..., node] if scalar else out[:, node]
        return out

    def eval(self, t, node=None):
        """Spline value at time(s) t; `node` selects one trailing column."""
        return self._eval(t, 0, node)

    def eval_derivative(self, t, node=None):
        """Analytic first derivative of the active cubic segment."""
        return self._eval(t, 1, node)

    def eval_second_derivative(self, t, node=None):
        return self._eval(t, 2, node)


def fit_natural_cubic(times, values) -> SplinePath:
    """Fit natural cubic splines through (times, values) knots.

    times must be strictly increasing with at least 2 entries; values has one
    leading entry per knot and arbitrary trailing shape.  With only 2 knots
    the natural boundary forces the connecting line.
    """
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if times.ndim != 1 or len(times) < 2:
        raise InputError("need at least 2 knots")
    if values.shape[0] != len(times):
        raise InputError(
            f"got {values.shape[0]} value rows for {len(times)} knot times"
        )
    h = np.diff(times)
    if np.any(h <= 0):
        raise InputError("knot times must be strictly increasing")

    n = len(times)
    rest = values.shape[1:]
    flat = values.reshape(n, -1)

    # Second derivatives M at the knots; natural boundary pins M[0] = M[-1] = 0.
    m = np.zeros_like(flat)
    if n > 2:
        slopes = np.diff(flat, axis=0) / h[:, None]
        rhs = 6.0 * np.diff(slopes, axis=0)
        lower = h[:-1].copy()
        diag = 2.0 * (h[:-1] + h[1:])
        upper = h[1:].copy()
        m[1:-1] = _thomas(lower, diag, upper, rhs)

    hc = h[:, None]
    d = flat[:-1]
    c = np.diff(flat, axis=0) / hc - (m[1:] + 2.0 * m[:-1]) * hc / 6.0
    b = m[:-1] / 2.0
    a = (m[1:] - m[:-1]) / (6.0 * hc)
    coeffs = np.stack([d, c, b, a], axis=1).reshape(n - 1, 4, *rest)

    return SplinePath(knot_times=times, knot_values=values, segment_coeffs=coeffs)


def _thomas(lower, diag, upper, rhs):
    """Solve the tridiagonal system in place-free form; rhs may have columns."""
    k = len(diag)
    cp = np.empty(k)
    dp = np.empty_like(rhs)
    cp[0] = upper[0] / diag[0]
    dp[0] = rhs[0] / diag[0]
    for i in range(1, k):
        denom = diag[i] - lower[i] * cp[i - 1]
        cp[i] = upper[i] / denom if i < k - 1 else 0.0
        dp[i] = (rhs[i] - lower[i] * dp[i - 1]) / denom
    out = np.empty_like(rhs)
    out[-1] = dp[-1]
    for i in range(k - 2, -1, -1):
        out[i] = dp[i] - cp[i] * out[i + 1]
    return out
