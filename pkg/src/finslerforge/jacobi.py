"""Jacobi fields, their classification, rank estimation, and Rauch bounds.

The Jacobi equation J'' + R(J, T)T = 0 is integrated in chart coordinates as
a first-order system in (J, U) with U = D_T J; both the Chern coefficients
and the curvature operator are evaluated exactly per step (Berwald metrics:
both are base-point functions, evaluated at the velocity as reference).

Rank uses the nullspace of a positive-semidefinite quadrature form built
from covariant-derivative data: a Jacobi field has constant reference-vector
norm exactly when D_T J vanishes, so Q(J) = sum_q w_q ||D_T J(t_q)||_T^2 is
zero precisely on the parallel fields.  Eigenvalues are normalized against
the field's own window mass (a generalized eigenproblem) so hyperbolic
growth cannot mask polynomially growing non-parallel fields.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import eigh

from . import sampling
from .errors import ClassificationError, ConvergenceError, InputError
from .metrics import TangentVector
from .profile import DEFAULT_PROFILE
from .tensors import Flag, _pipeline, ensure_berwald, flag_curvature, \
    hh_curvature
from .geodesics import geodesic_ivp


class _JacobiSystem:
    """Per-step coefficients Gamma(x) and A(x, T) = R(T, .)T along a path."""

    def __init__(self, m, profile):
        self.m = m
        self.profile = profile
        self.flat = not m.uses_x
        self.pipeline = _pipeline(m)

    def coefficients(self, x, vel):
        n = self.m.dim
        if self.flat:
            return np.zeros((n, n, n)), np.zeros((n, n))
        ref = vel / max(self.m.f(x, vel), self.profile.slit_epsilon)
        chern, riem = self.pipeline.curvature(x, ref)
        jac_op = np.einsum("j,ijkl,l->ik", vel, riem, vel)
        return chern, jac_op


def _integrate_fields(m, path, ics, t0, t1, profile):
    """Integrate (J, U) for a stack of initial conditions; returns OdeSolution."""
    n = m.dim
    system = _JacobiSystem(m, profile)
    count = ics.shape[0]

    def rhs(t, z):
        state = path.state(t)
        x, vel = state[:n], state[n:]
        chern, jac_op = system.coefficients(x, vel)
        fields = z.reshape(count, 2 * n)
        J = fields[:, :n]
        U = fields[:, n:]
        gamma_t = np.einsum("ijk,k->ij", chern, vel)
        dJ = U - J @ gamma_t.T
        dU = -J @ jac_op.T - U @ gamma_t.T
        return np.concatenate([dJ, dU], axis=1).ravel()

    sol = solve_ivp(rhs, (t0, t1), ics.ravel(), method="RK45",
                    rtol=profile.rtol, atol=profile.atol, dense_output=True)
    if not sol.success:
        raise ConvergenceError(f"Jacobi integration failed: {sol.message}")
    return sol


class _FieldBundle:
    """Dense-output view of a stack of Jacobi fields over [t_lo, t_hi]."""

    def __init__(self, m, path, ics, t0, t_lo, t_hi, profile):
        self.m = m
        self.path = path
        self.count = ics.shape[0]
        self.t0 = t0
        self.t_lo = t_lo
        self.t_hi = t_hi
        self._fwd = _integrate_fields(m, path, ics, t0, t_hi, profile) \
            if t_hi > t0 else None
        self._bwd = _integrate_fields(m, path, ics, t0, t_lo, profile) \
            if t_lo < t0 else None
        self._ics = ics

    def eval(self, t):
        """(J, U) stacks at time t: arrays (count, n)."""
        n = self.m.dim
        if abs(t - self.t0) < 1e-300:
            z = self._ics
        elif t >= self.t0:
            z = self._fwd.sol(t).reshape(self.count, 2 * n)
        else:
            z = self._bwd.sol(t).reshape(self.count, 2 * n)
        return z[:, :n], z[:, n:]


def metric_at(m, path, t):
    """Fundamental tensor along the path with the velocity as reference."""
    from .tensors import fundamental_tensor

    n = m.dim
    state = path.state(t)
    return fundamental_tensor(
        m, TangentVector(state[:n], state[n:])).matrix


@dataclass(eq=False)
class JacobiSolution:
    """Sampled (J, J') along a geodesic with reference-norm history."""

    path: object
    ts: np.ndarray
    J: np.ndarray
    Jp: np.ndarray
    norms: np.ndarray
    bundle: object

    def norm(self, t):
        J, _ = self.bundle.eval(t)
        g = metric_at(self.path.metric, self.path, t)
        return float(np.sqrt(max(J[0] @ g @ J[0], 0.0)))

    def jacobi_residual(self, t):
        """|| d/dt (J,U) - rhs || consistency proxy via finite differences."""
        h = 1e-5
        lo = max(self.bundle.t_lo, t - h)
        hi = min(self.bundle.t_hi, t + h)
        J0, U0 = self.bundle.eval(lo)
        J1, U1 = self.bundle.eval(hi)
        dU = (U1[0] - U0[0]) / (hi - lo)
        n = self.path.metric.dim
        state = self.path.state(t)
        system = _JacobiSystem(self.path.metric, DEFAULT_PROFILE)
        chern, jac_op = system.coefficients(state[:n], state[n:])
        Jm, Um = self.bundle.eval(t)
        expected = -jac_op @ Jm[0] - np.einsum(
            "ijk,j,k->i", chern, Um[0], state[n:])
        return float(np.max(np.abs(dU - expected)))


def jacobi_ivp(m, path, J0, J0p, profile=DEFAULT_PROFILE, samples=129):
    """Integrate the Jacobi equation along a geodesic path (Berwald only).

    J0p is the covariant derivative D_T J at the anchor time (t = 0 when the
    path contains it, else the left endpoint).
    """
    ensure_berwald(m, profile)
    n = m.dim
    J0 = np.asarray(J0, dtype=float)
    J0p = np.asarray(J0p, dtype=float)
    if J0.shape != (n,) or J0p.shape != (n,):
        raise InputError(f"Jacobi data must have {n} components")
    t_lo, t_hi = path.t_min, path.t_max
    t0 = 0.0 if t_lo <= 0.0 <= t_hi else t_lo
    ics = np.concatenate([J0, J0p]).reshape(1, 2 * n)
    bundle = _FieldBundle(m, path, ics, t0, t_lo, t_hi, profile)
    ts = np.linspace(t_lo, t_hi, samples)
    J = np.empty((samples, n))
    Jp = np.empty((samples, n))
    norms = np.empty(samples)
    for i, t in enumerate(ts):
        Ji, Ui = bundle.eval(t)
        J[i] = Ji[0]
        Jp[i] = Ui[0]
        g = metric_at(m, path, t)
        norms[i] = math.sqrt(max(float(Ji[0] @ g @ Ji[0]), 0.0))
    return JacobiSolution(path, ts, J, Jp, norms, bundle)


def classify_jacobi(sol, horizon, tol=1e-6):
    """Label a Jacobi solution: parallel, stable, unstable, or mixed."""
    ts = sol.ts
    if ts[0] > -horizon + 1e-12 or ts[-1] < horizon - 1e-12:
        raise InputError(
            f"window [-{horizon}, {horizon}] not covered by the solution "
            f"([{ts[0]:.3g}, {ts[-1]:.3g}]); widen the path")
    mask = (ts >= -horizon) & (ts <= horizon)
    norms = sol.norms[mask]
    scale = float(np.max(norms))
    if scale <= 0.0:
        return "parallel"
    if (np.max(norms) - np.min(norms)) / scale < tol:
        return "parallel"
    diffs = np.diff(norms)
    if np.all(diffs <= tol * scale):
        return "stable"
    if np.all(diffs >= -tol * scale):
        return "unstable"
    return "mixed"


@dataclass(eq=False)
class RankEstimate:
    """Nullspace dimension of the parallel-field quadrature form."""

    vector: object
    horizon: float
    spectrum: np.ndarray
    rank: int
    rank_doubled: int
    spectrum_doubled: np.ndarray

    @property
    def stable(self):
        return self.rank == self.rank_doubled


def _rank_spectrum(m, v, horizon, profile):
    n = m.dim
    path_f = geodesic_ivp(m, v, (0.0, horizon), profile)
    path_b = geodesic_ivp(m, v, (0.0, -horizon), profile)
    ics = np.zeros((2 * n, 2 * n))
    for a in range(2 * n):
        ics[a, a] = 1.0
    bundle_f = _FieldBundle(m, path_f, ics, 0.0, 0.0, horizon, profile)
    bundle_b = _FieldBundle(m, path_b, ics, 0.0, -horizon, 0.0, profile)
    count = profile.rank_quadrature_points
    if count % 2 == 0:
        count += 1
    ts = np.linspace(-horizon, horizon, count)
    h = ts[1] - ts[0]
    weights = np.ones(count)
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0
    weights *= h / 3.0
    M = np.zeros((2 * n, 2 * n))
    N = np.zeros((2 * n, 2 * n))
    for t, w in zip(ts, weights):
        bundle = bundle_f if t >= 0 else bundle_b
        path = path_f if t >= 0 else path_b
        J, U = bundle.eval(t)
        g = metric_at(m, path, t)
        M += w * (U @ g @ U.T)
        N += w * (J @ g @ J.T)
    eigs = eigh(M, N, eigvals_only=True)
    return np.maximum(eigs, 0.0) * horizon * horizon


def rank_estimate(m, v, horizon=None, profile=DEFAULT_PROFILE):
    """Dimension of the space of parallel Jacobi fields along gamma_v.

    Requires a unit vector and a Berwald metric.  The spectrum is recomputed
    at twice the horizon; the ``stable`` flag records whether the rank is
    unchanged (callers should treat unstable results as unconverged).
    """
    ensure_berwald(m, profile)
    horizon = profile.rank_horizon if horizon is None else float(horizon)
    f = m.f(np.asarray(v.base, dtype=float),
            np.asarray(v.components, dtype=float))
    if abs(f - 1.0) > 1e-8:
        raise InputError(f"rank_estimate needs a unit vector, got F = {f}")
    spec1 = _rank_spectrum(m, v, horizon, profile)
    spec2 = _rank_spectrum(m, v, 2.0 * horizon, profile)
    cutoff = profile.rank_svd_cutoff
    rank1 = int(np.sum(spec1 < cutoff))
    rank2 = int(np.sum(spec2 < cutoff))
    rank1 = max(rank1, 1)  # the velocity field is always parallel
    rank2 = max(rank2, 1)
    return RankEstimate(v, horizon, spec1, rank1, rank2, spec2)


def rauch_check(m, path, trials=200, b=1.0, profile=DEFAULT_PROFILE, seed=0,
                curvature_samples=16):
    """Check the comparison bounds t2/t1 <= |J(t2)|/|J(t1)| <= s_b ratios.

    Preconditions -b^2 <= K <= 0 are verified on sampled flags along the
    path before any trial runs.
    """
    ensure_berwald(m, profile)
    n = m.dim
    gen = sampling.rng(seed, sampling.STREAM_RAUCH)
    t_lo, t_hi = path.t_min, path.t_max
    if not (t_lo <= 0.0 < t_hi):
        raise InputError("rauch_check expects a path containing t = 0")
    # curvature-bound precondition on sampled flags
    slack = profile.rauch_slack
    for t in np.linspace(t_lo, t_hi, curvature_samples):
        state = path.state(t)
        x, vel = state[:n], state[n:]
        data = hh_curvature(m, x, profile)
        for _ in range(2):
            V = sampling.random_directions(n, 1, gen)[0]
            denom_edge = V - vel * (vel @ V) / max(vel @ vel, 1e-300)
            if np.linalg.norm(denom_edge) < 1e-8:
                continue
            K = flag_curvature(
                m, Flag(TangentVector(x, vel / m.f(x, vel)), V), profile,
                curvature=data)
            if K > 1e-7 or K < -b * b - 1e-7:
                raise ClassificationError(
                    f"curvature bound [-{b*b:g}, 0] violated: K = {K:.6g} "
                    f"at t = {t:.3g}")
    # basis of J(0) = 0 fields
    ics = np.zeros((n, 2 * n))
    for a in range(n):
        ics[a, n + a] = 1.0
    bundle = _FieldBundle(m, path, ics, 0.0, 0.0, t_hi, profile)
    g0 = metric_at(m, path, 0.0)
    state0 = path.state(0.0)
    vel0 = state0[n:]

    def s_b(t):
        return math.sinh(b * t) / b if b > 0 else t

    worst = 0.0
    violations = 0
    for _ in range(trials):
        w = sampling.random_directions(n, 1, gen)[0]
        w = w - vel0 * float(vel0 @ g0 @ w) / float(vel0 @ g0 @ vel0)
        wn = np.linalg.norm(w)
        if wn < 1e-10:
            continue
        w /= wn
        t1 = gen.uniform(0.05, 1.0) * t_hi
        t2 = gen.uniform(t1 / t_hi, 1.0) * t_hi
        if t2 < t1:
            t1, t2 = t2, t1
        norms = []
        for t in (t1, t2):
            J, _ = bundle.eval(t)
            field = w @ J
            g = metric_at(m, path, t)
            norms.append(math.sqrt(max(float(field @ g @ field), 0.0)))
        if norms[0] <= 0.0:
            continue
        ratio = norms[1] / norms[0]
        lower = t2 / t1
        upper = s_b(t2) / s_b(t1)
        excess = max(lower - ratio, ratio - upper, 0.0)
        rel_excess = excess / max(ratio, lower)
        worst = max(worst, rel_excess)
        if rel_excess > slack:
            violations += 1
    return {"ok": violations == 0, "worst_ratio_violation": float(worst),
            "violations": int(violations), "trials": int(trials),
            "curvature_bound": float(b), "seed": int(seed)}
