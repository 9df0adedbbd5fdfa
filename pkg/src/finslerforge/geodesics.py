"""Geodesic initial- and boundary-value problems and the induced distance.

The geodesic spray needs only low-order jets of the energy W = (1/2)F^2:
contracting the Chern coefficients with the velocity kills every Cartan term
(Euler's identity), leaving the Euler-Lagrange form

    g(x, y) xddot = W_x(x, y) - W_xy(x, y) y,

which one small jet evaluation per right-hand side supplies.  Integration is
scipy's adaptive Dormand-Prince RK45 with dense output.

The boundary solver is damped Gauss-Newton shooting, seeded with the straight
chart segment and multi-started on stall.  Spans whose estimated length
exceeds the profile's segment length switch to multiple shooting: a single
shot's endpoint sensitivity grows like e^(length) in negative curvature, so
long single shots cannot hit their target in double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from . import jets, sampling
from .errors import ChartError, ConvergenceError, InputError
from .metrics import TangentVector, _ProductChart, require_slit
from .profile import DEFAULT_PROFILE

if jets._JIT_ENABLED:
    from numba import njit as _njit

    def _jit(func):
        return _njit(cache=True)(func)
else:  # pragma: no cover
    def _jit(func):
        return func


@_jit
def _spray_kernel(ops, arg1, arg2, payload, x, y, x_mono, y_mono,
                  mi, mj, mk, max_total, W, ig, gfac, ixy, ix1, acc):
    status = jets.jet_program_eval(ops, arg1, arg2, payload, x, y,
                                   x_mono, y_mono, mi, mj, mk, max_total, W)
    if status != 0:
        return status
    m = W.shape[1]
    f = W[W.shape[0] - 1]
    w = np.empty(m)
    jets._vec_mul(w, f, f, mi, mj, mk)
    for c in range(m):
        w[c] *= 0.5
    n = x.shape[0]
    g = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            g[i, j] = w[ig[i, j]] * gfac[i, j]
    rhs = np.empty(n)
    for s in range(n):
        b = 0.0
        for k in range(n):
            b += y[k] * w[ixy[k, s]]
        rhs[s] = w[ix1[s]] - b
    sol = np.linalg.solve(g, rhs)
    for i in range(n):
        acc[i] = sol[i]
    return 0


class _Spray:
    """Per-metric geodesic acceleration a(x, y); cached on the metric."""

    def __init__(self, m):
        self.m = m
        n = m.dim
        alg = jets.spray_algebra(n)
        self.alg = alg
        prog = m.program
        self.prog = prog
        self.ig = np.array([[alg.idx(y_exp=(i, j)) for j in range(n)]
                            for i in range(n)])
        self.gfac = np.array([[2.0 if i == j else 1.0 for j in range(n)]
                              for i in range(n)])
        self.ixy = np.array([[alg.idx(x_exp=(k,), y_exp=(s,))
                              for s in range(n)] for k in range(n)])
        self.ix1 = np.array([alg.idx(x_exp=(s,)) for s in range(n)])
        self.flat = not m.uses_x  # locally Minkowski: zero spray

    def __call__(self, x, y):
        if self.flat:
            return np.zeros(self.m.dim)
        acc = np.empty(self.m.dim)
        work = np.empty((self.prog.ops.shape[0], self.alg.size))
        status = _spray_kernel(
            self.prog.ops, self.prog.arg1, self.prog.arg2, self.prog.payload,
            x, y, self.alg.x_mono, self.alg.y_mono,
            self.alg.mul_i, self.alg.mul_j, self.alg.mul_k,
            self.alg.max_total, work, self.ig, self.gfac, self.ixy,
            self.ix1, acc)
        if status != 0:
            jets._raise_eval_error(status, self.prog)
        return acc


def spray(m):
    return m._cached("spray", lambda: _Spray(m))


def _chart_events(m):
    events = []

    def ball_event(radius, offset, dim):
        def ev(t, z):
            xs = z[offset:offset + dim]
            return radius * radius - float(xs @ xs)
        ev.terminal = True
        ev.direction = -1
        return ev

    chart = m.chart
    if isinstance(chart, _ProductChart):
        a, b = m.factors
        if getattr(a.chart, "radius", None) is not None:
            events.append(ball_event(a.chart.radius, 0, a.dim))
        if getattr(b.chart, "radius", None) is not None:
            events.append(ball_event(b.chart.radius, a.dim, b.dim))
    elif getattr(chart, "radius", None) is not None:
        events.append(ball_event(chart.radius, 0, m.dim))
    return events


@dataclass(eq=False)
class GeodesicPath:
    """A sampled constant-speed geodesic with dense-output interpolation."""

    metric: object
    ts: np.ndarray
    states: np.ndarray          # (N, 2n): chart position and velocity
    speed: float
    segments: list              # [(t_lo, t_hi, OdeSolution), ...] increasing

    @property
    def t_min(self):
        return float(min(self.ts[0], self.ts[-1]))

    @property
    def t_max(self):
        return float(max(self.ts[0], self.ts[-1]))

    def state(self, t):
        t = float(t)
        lo = self.segments[0][0]
        hi = self.segments[-1][1]
        if t < lo - 1e-12 or t > hi + 1e-12:
            raise InputError(f"time {t} outside path domain [{lo}, {hi}]")
        for seg_lo, seg_hi, sol in self.segments:
            if t <= seg_hi or (seg_lo, seg_hi, sol) is self.segments[-1]:
                return np.asarray(sol(min(max(t, seg_lo), seg_hi)))
        raise InputError("empty path")  # pragma: no cover

    def position(self, t):
        return self.state(t)[:self.metric.dim]

    def velocity(self, t):
        return self.state(t)[self.metric.dim:]

    def tangent(self, t):
        s = self.state(t)
        return TangentVector(s[:self.metric.dim], s[self.metric.dim:])

    def speeds(self):
        """F along the sampled grid; constant up to integrator tolerance."""
        n = self.metric.dim
        return np.array([self.metric.f(s[:n], s[n:]) for s in self.states])


def geodesic_ivp(m, v, t_span, profile=DEFAULT_PROFILE, dense=True,
                 max_step=np.inf):
    """Integrate the geodesic with initial tangent v over t_span.

    Raises ChartError with the exit time if the solution leaves the chart,
    and ConvergenceError on integrator failure.
    """
    x, y, speed = require_slit(m, v, profile.slit_epsilon)
    acc = spray(m)
    n = m.dim

    def rhs(t, z):
        out = np.empty(2 * n)
        out[:n] = z[n:]
        out[n:] = acc(z[:n], z[n:])
        return out

    z0 = np.concatenate([x, y])
    sol = solve_ivp(rhs, t_span, z0, method="RK45", rtol=profile.rtol,
                    atol=profile.atol, dense_output=dense,
                    events=_chart_events(m) or None, max_step=max_step)
    if sol.status == 1:
        exit_time = float(min((te[0] for te in sol.t_events if len(te)),
                              key=abs))
        raise ChartError(
            f"geodesic left the chart of {m.label} at t={exit_time:.6g}",
            exit_time=exit_time)
    if not sol.success:
        raise ConvergenceError(f"geodesic integration failed: {sol.message}")
    ts = sol.t
    states = sol.y.T.copy()
    lo, hi = (float(ts[0]), float(ts[-1])) if ts[0] <= ts[-1] else \
        (float(ts[-1]), float(ts[0]))
    segments = [(lo, hi, sol.sol)] if dense else []
    return GeodesicPath(m, ts, states, speed, segments)


def _endpoint(m, start_state, t0, t1, profile):
    """Endpoint state of a shot; (ok, state_or_none)."""
    n = m.dim
    acc = spray(m)

    def rhs(t, z):
        out = np.empty(2 * n)
        out[:n] = z[n:]
        out[n:] = acc(z[:n], z[n:])
        return out

    try:
        sol = solve_ivp(rhs, (t0, t1), start_state, method="RK45",
                        rtol=profile.rtol, atol=profile.atol,
                        events=_chart_events(m) or None)
    except (ChartError, ConvergenceError):
        return False, None
    except Exception:
        return False, None
    if sol.status != 0 or not sol.success:
        return False, None
    return True, sol.y[:, -1].copy()


def _chord_length(m, p, q, nodes=24):
    """F-length of the straight chart chord; upper-ish bound for seeding."""
    ts, ws = np.polynomial.legendre.leggauss(nodes)
    total = 0.0
    dq = q - p
    for t, w in zip(ts, ws):
        s = 0.5 * (t + 1.0)
        xt = p + s * dq
        try:
            total += 0.5 * w * m.f(xt, dq)
        except Exception:
            total += 0.5 * w * float(np.linalg.norm(dq))
    return float(total)


def _seed_states(m, p, q, k, est_len):
    """Chord-interpolated multiple-shooting seed: k segment start states."""
    n = m.dim
    # place nodes at equal chord-F-length fractions
    samples = 64
    ss = np.linspace(0.0, 1.0, samples + 1)
    dq = q - p
    fs = np.empty(samples)
    for i in range(samples):
        mid = p + 0.5 * (ss[i] + ss[i + 1]) * dq
        try:
            fs[i] = max(m.f(mid, dq), 1e-12)
        except Exception:
            fs[i] = float(np.linalg.norm(dq)) + 1e-12
    cum = np.concatenate([[0.0], np.cumsum(fs)])
    cum /= cum[-1]
    states = np.empty((k, 2 * n))
    taus = np.linspace(0.0, 1.0, k + 1)
    for i in range(k):
        s_i = float(np.interp(i / k, cum, ss))
        s_n = float(np.interp((i + 1) / k, cum, ss))
        xi = p + s_i * dq
        xn = p + s_n * dq
        states[i, :n] = xi
        states[i, n:] = (xn - xi) / (taus[i + 1] - taus[i])
    return states


def geodesic_bvp(m, p, q, profile=DEFAULT_PROFILE, seed_velocity=None,
                 seed_states=None):
    """Geodesic with gamma(0) = p, gamma(1) = q by damped Gauss-Newton shooting.

    Uses single shooting for short spans and multiple shooting (segments of
    roughly profile.bvp_segment_length) for long ones; multi-starts over 8
    low-discrepancy directions when the seeded solve stalls.
    """
    p = m.require_point(np.asarray(p, dtype=float))
    q = m.require_point(np.asarray(q, dtype=float))
    n = m.dim
    if np.allclose(p, q, atol=1e-15):
        raise InputError("boundary points must be distinct")
    est_len = max(_chord_length(m, p, q), 1e-12)
    if seed_states is not None:
        k = seed_states.shape[0]
    else:
        k = max(1, int(math.ceil(est_len / profile.bvp_segment_length)))
    scale = max(1.0, est_len, float(np.linalg.norm(p)),
                float(np.linalg.norm(q)))
    tol = profile.bvp_tol * scale

    def initial_unknowns():
        if seed_states is not None:
            u = seed_states.copy()
            u[0, :n] = p
            return u
        states = _seed_states(m, p, q, k, est_len)
        if seed_velocity is not None and k == 1:
            states[0, n:] = seed_velocity
        return states

    result, best_residual = _gauss_newton_shoot(m, p, q, initial_unknowns(),
                                                k, tol, profile)
    if result is not None:
        return _assemble_bvp_path(m, p, result, k, profile)
    # multi-start over low-discrepancy directions (single shooting only)
    if k == 1:
        dirs = sampling.sphere_directions(n, profile.bvp_multistarts, 17)
        for d in dirs:
            try:
                fd = m.f(p, d)
            except Exception:
                continue
            if fd <= 0:
                continue
            states = np.empty((1, 2 * n))
            states[0, :n] = p
            states[0, n:] = est_len * d / fd
            result, err = _gauss_newton_shoot(m, p, q, states, 1, tol, profile)
            best_residual = min(best_residual, err)
            if result is not None:
                return _assemble_bvp_path(m, p, result, 1, profile)
    raise ConvergenceError(
        f"boundary-value solve failed from {p.tolist()} to {q.tolist()} "
        f"({k} segments, best residual {best_residual:.3e})",
        residual=best_residual)


def _residual(m, p, q, states, k, profile):
    """Shooting residuals: interface continuity plus final position."""
    n = m.dim
    taus = np.linspace(0.0, 1.0, k + 1)
    res = np.empty((k - 1) * 2 * n + n)
    start = np.empty(2 * n)
    start[:n] = p
    start[n:] = states[0, n:]
    cur = start
    for i in range(k):
        ok, end = _endpoint(m, cur, taus[i], taus[i + 1], profile)
        if not ok:
            return None
        if i < k - 1:
            res[i * 2 * n:(i + 1) * 2 * n] = end - states[i + 1]
            cur = states[i + 1]
        else:
            res[(k - 1) * 2 * n:] = end[:n] - q
    return res


def _pack(states, k, n):
    # unknowns: initial velocity plus interior full states
    parts = [states[0, n:]]
    for i in range(1, k):
        parts.append(states[i])
    return np.concatenate(parts)


def _unpack(u, k, n, p):
    states = np.empty((k, 2 * n))
    states[0, :n] = p
    states[0, n:] = u[:n]
    for i in range(1, k):
        states[i] = u[n + (i - 1) * 2 * n: n + i * 2 * n]
    return states


def _gauss_newton_shoot(m, p, q, states, k, tol, profile):
    """Damped Gauss-Newton; returns (solution states or None, best residual)."""
    n = m.dim
    u = _pack(states, k, n)
    res = _residual(m, p, q, _unpack(u, k, n, p), k, profile)
    if res is None:
        return None, np.inf
    jac = None
    err = float(np.max(np.abs(res)))
    for _ in range(profile.bvp_max_iterations):
        if err < tol:
            return _unpack(u, k, n, p), err
        refreshed = False
        if jac is None:
            jac = _fd_jacobian(m, p, q, u, k, profile, res)
            refreshed = True
            if jac is None:
                return None, err
        try:
            step = np.linalg.lstsq(jac, -res, rcond=None)[0]
        except np.linalg.LinAlgError:
            return None, err
        improved = False
        damping = 1.0
        for _ in range(10):
            trial = u + damping * step
            trial_res = _residual(m, p, q, _unpack(trial, k, n, p), k, profile)
            if trial_res is not None and \
                    float(np.max(np.abs(trial_res))) < err:
                u, res = trial, trial_res
                err = float(np.max(np.abs(res)))
                improved = True
                break
            damping *= 0.5
        if not improved:
            if refreshed:
                return None, err  # stalled even with a fresh jacobian
            jac = None  # retry this point with a refreshed jacobian
    if err < tol:
        return _unpack(u, k, n, p), err
    return None, err


def _fd_jacobian(m, p, q, u, k, profile, res0):
    cols = []
    for d in range(u.shape[0]):
        h = profile.bvp_fd_step * max(1.0, abs(u[d]))
        up = u.copy()
        up[d] += h
        res = _residual(m, p, q, _unpack(up, k, m.dim, p), k, profile)
        if res is None:
            up[d] -= 2 * h
            res = _residual(m, p, q, _unpack(up, k, m.dim, p), k, profile)
            if res is None:
                return None
            cols.append((res0 - res) / h)
        else:
            cols.append((res - res0) / h)
    return np.column_stack(cols)


def _assemble_bvp_path(m, p, states, k, profile):
    n = m.dim
    taus = np.linspace(0.0, 1.0, k + 1)
    all_ts = []
    all_states = []
    segments = []
    acc = spray(m)

    def rhs(t, z):
        out = np.empty(2 * n)
        out[:n] = z[n:]
        out[n:] = acc(z[:n], z[n:])
        return out

    cur = states[0].copy()
    cur[:n] = p
    for i in range(k):
        sol = solve_ivp(rhs, (taus[i], taus[i + 1]), cur, method="RK45",
                        rtol=profile.rtol, atol=profile.atol,
                        dense_output=True, events=_chart_events(m) or None)
        if sol.status != 0 or not sol.success:
            raise ConvergenceError("final boundary-value integration failed")
        all_ts.append(sol.t if i == 0 else sol.t[1:])
        cols = sol.y.T
        all_states.append(cols if i == 0 else cols[1:])
        segments.append((float(taus[i]), float(taus[i + 1]), sol.sol))
        if i < k - 1:
            cur = states[i + 1]
    ts = np.concatenate(all_ts)
    grid = np.vstack(all_states)
    speed = m.f(p, states[0, n:])
    path = GeodesicPath(m, ts, grid, speed, segments)
    path.shooting_states = states  # warm-start data for nearby solves
    return path


def distance(m, p, q, profile=DEFAULT_PROFILE, **bvp_kwargs):
    """Induced distance d(p, q): length of the connecting geodesic.

    For non-reversible metrics the value is directed (p to q).
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.allclose(p, q, atol=1e-15):
        return 0.0
    path = geodesic_bvp(m, p, q, profile, **bvp_kwargs)
    return path.speed


def path_length(m, path, nodes=64):
    """Quadrature of F along a path's dense output (consistency checks)."""
    ts, ws = np.polynomial.legendre.leggauss(nodes)
    lo, hi = path.t_min, path.t_max
    total = 0.0
    for t, w in zip(ts, ws):
        tt = lo + 0.5 * (t + 1.0) * (hi - lo)
        s = path.state(tt)
        total += 0.5 * (hi - lo) * w * m.f(s[:m.dim], s[m.dim:])
    return float(total)
