"""Parallel transport along curves on Berwald metrics.

On a Berwald space the Chern coefficients are base-point functions, so
covariant differentiation along a curve needs no reference vector and
transport is linear in the transported vector; Minkowski norms are preserved
exactly.  Non-Berwald metrics are rejected: there the covariant derivative
depends on the reference vector and "the" parallel transport is ill-defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from .errors import ConvergenceError, InputError
from .geodesics import GeodesicPath
from .profile import DEFAULT_PROFILE
from .tensors import _pipeline, ensure_berwald


@dataclass(eq=False)
class SampledCurve:
    """A chart curve given by samples; differentiable via cubic spline."""

    ts: np.ndarray
    xs: np.ndarray

    def __post_init__(self):
        self.ts = np.asarray(self.ts, dtype=float)
        self.xs = np.asarray(self.xs, dtype=float)
        if self.ts.ndim != 1 or self.xs.shape[0] != self.ts.shape[0]:
            raise InputError("curve needs matching ts (N,) and xs (N, n)")
        if self.ts.shape[0] < 4:
            raise InputError("curve needs at least 4 samples")
        self._spline = CubicSpline(self.ts, self.xs, axis=0)
        self._dspline = self._spline.derivative()

    @property
    def t_min(self):
        return float(self.ts[0])

    @property
    def t_max(self):
        return float(self.ts[-1])

    def position(self, t):
        return np.asarray(self._spline(t))

    def velocity(self, t):
        return np.asarray(self._dspline(t))


def as_curve(curve):
    if isinstance(curve, (GeodesicPath, SampledCurve)):
        return curve
    raise InputError("expected a GeodesicPath or SampledCurve")


@dataclass(eq=False)
class TransportResult:
    """Endpoint of D_T W = 0 with the Minkowski-norm drift bookkeeping."""

    curve: object
    w_start: np.ndarray
    w_end: np.ndarray
    norm_start: float
    norm_end: float
    curve_length: float

    @property
    def norm_drift(self):
        return abs(self.norm_end - self.norm_start)

    @property
    def drift_per_unit_length(self):
        return self.norm_drift / max(self.curve_length, 1e-300)


def curve_length(m, curve, nodes=64):
    ts, ws = np.polynomial.legendre.leggauss(nodes)
    lo, hi = curve.t_min, curve.t_max
    total = 0.0
    for t, w in zip(ts, ws):
        tt = lo + 0.5 * (t + 1.0) * (hi - lo)
        total += 0.5 * (hi - lo) * w * m.f(curve.position(tt),
                                           curve.velocity(tt))
    return float(total)


def parallel_transport(m, curve, w0, profile=DEFAULT_PROFILE):
    """Solve D_T W = 0 along the curve; linear in w0, norm preserving."""
    ensure_berwald(m, profile)
    curve = as_curve(curve)
    w0 = np.asarray(w0, dtype=float)
    n = m.dim
    if w0.shape != (n,):
        raise InputError(f"transported vector must have {n} components")
    x0 = curve.position(curve.t_min)
    xe = curve.position(curve.t_max)
    norm_start = m.f(x0, w0)
    length = curve_length(m, curve)

    if not m.uses_x:
        # locally Minkowski: the connection vanishes identically
        return TransportResult(curve, w0, w0.copy(), norm_start,
                               m.f(xe, w0), length)

    pipeline = _pipeline(m)

    def rhs(t, w):
        x = curve.position(t)
        vel = curve.velocity(t)
        ref = vel / max(m.f(x, vel), profile.slit_epsilon)
        chern = pipeline.connection(x, ref)["chern"]
        return -np.einsum("ijk,j,k->i", chern, w, vel)

    sol = solve_ivp(rhs, (curve.t_min, curve.t_max), w0, method="RK45",
                    rtol=profile.rtol, atol=profile.atol)
    if not sol.success:
        raise ConvergenceError(f"transport integration failed: {sol.message}")
    w_end = sol.y[:, -1].copy()
    return TransportResult(curve, w0, w_end, norm_start, m.f(xe, w_end),
                           length)
