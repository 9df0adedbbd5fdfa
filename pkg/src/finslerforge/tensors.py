"""Pointwise tensor calculus: fundamental and Cartan tensors, connections,
hh-curvature, flag curvature, and the volume density.

All quantities derive from jets of the energy W = (1/2) F^2.  Jet coefficients
are Taylor coefficients, so a raw partial derivative is ``coefficient *
product-of-exponent-factorials``; the extraction tables below encode exactly
that bookkeeping.

For curvature the whole Chern-connection assembly is rerun over first-order
x-jets ("ring" arrays with a leading axis of size 1+n holding value and
x-partials), which yields exact coefficient derivatives for the classical
affine curvature expansion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import jets, sampling
from .errors import (ClassificationError, DegenerateFlagError, InputError,
                     SlitError)
from .metrics import (MetricClassification, TangentVector, random_chart_point,
                      require_slit)
from .profile import DEFAULT_PROFILE


@dataclass(frozen=True, eq=False)
class FundamentalTensor:
    """g_ij at a point of the slit tangent bundle, with its inverse."""

    x: np.ndarray
    y: np.ndarray
    matrix: np.ndarray
    inverse: np.ndarray


@dataclass(frozen=True, eq=False)
class CartanTensor:
    """Totally symmetric C_ijk; vanishes iff the metric is Riemannian at (x, y)."""

    x: np.ndarray
    y: np.ndarray
    array: np.ndarray


@dataclass(frozen=True, eq=False)
class ConnectionData:
    """Formal Christoffels, nonlinear connection and Chern coefficients."""

    x: np.ndarray
    y: np.ndarray
    gamma: np.ndarray
    nonlinear: np.ndarray
    chern: np.ndarray


@dataclass(frozen=True, eq=False)
class CurvatureData:
    """hh-curvature R^i_jkl of the x-only Chern connection (Berwald case)."""

    x: np.ndarray
    reference: np.ndarray
    tensor: np.ndarray
    chern: np.ndarray


@dataclass(frozen=True, eq=False)
class Flag:
    """Flagpole y with transverse edge V at the same base point."""

    pole: TangentVector
    edge: np.ndarray


# ---------------------------------------------------------------------------
# jet-coefficient extraction tables

class _Extraction:
    def __init__(self, alg, with_curvature):
        n = alg.dim
        self.alg = alg
        idx = alg.idx
        self.iy2 = np.array([[idx(y_exp=(i, j)) for j in range(n)]
                             for i in range(n)])
        self.fy2 = np.array([[2.0 if i == j else 1.0 for j in range(n)]
                             for i in range(n)])
        self.ix1 = np.array([idx(x_exp=(s,)) for s in range(n)])
        self.ixy = np.array([[idx(x_exp=(k,), y_exp=(s,)) for s in range(n)]
                             for k in range(n)])
        self.iy3 = np.empty((n, n, n), dtype=np.int64)
        self.fy3 = np.empty((n, n, n))
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    mono = idx(y_exp=(i, j, k))
                    self.iy3[i, j, k] = mono
                    self.fy3[i, j, k] = alg.fact[mono]
        self.ix1y2 = np.empty((n, n, n), dtype=np.int64)
        for k in range(n):
            self.ix1y2[k] = np.array(
                [[idx(x_exp=(k,), y_exp=(i, j)) for j in range(n)]
                 for i in range(n)])
        self.ix1y3 = None
        self.ix2y2 = None
        if with_curvature:
            self.ix1y3 = np.empty((n, n, n, n), dtype=np.int64)
            for l in range(n):
                self.ix1y3[l] = np.array(
                    [[[idx(x_exp=(l,), y_exp=(i, j, k)) for k in range(n)]
                      for j in range(n)] for i in range(n)])
            self.ix2y2 = np.empty((n, n, n, n), dtype=np.int64)
            self.fx2 = np.empty((n, n))
            for l in range(n):
                for k in range(n):
                    self.fx2[l, k] = 2.0 if l == k else 1.0
                    self.ix2y2[l, k] = np.array(
                        [[idx(x_exp=(l, k), y_exp=(i, j)) for j in range(n)]
                         for i in range(n)])


def _connection_extraction(m):
    return m._cached(
        "extract_conn",
        lambda: _Extraction(jets.connection_algebra(m.dim), False))


def _curvature_extraction(m):
    return m._cached(
        "extract_curv",
        lambda: _Extraction(jets.curvature_algebra(m.dim), True))


# ---------------------------------------------------------------------------
# first-order x-jet ("ring") helpers; leading axis = (value, d/dx^1..d/dx^n)

def _ring_mul_einsum(spec, a, b):
    out_value = np.einsum(spec, a[0], b[0])
    out = np.empty((a.shape[0],) + out_value.shape)
    out[0] = out_value
    for r in range(1, a.shape[0]):
        out[r] = np.einsum(spec, a[0], b[r]) + np.einsum(spec, a[r], b[0])
    return out


def _ring_inverse(gr):
    inv0 = np.linalg.inv(gr[0])
    out = np.empty_like(gr)
    out[0] = inv0
    for r in range(1, gr.shape[0]):
        out[r] = -inv0 @ gr[r] @ inv0
    return out


# ---------------------------------------------------------------------------
# assembly

def _assemble_connection(g, dg, cartan, y):
    """Float assembly of gamma, N, Gamma from raw derivative tensors."""
    ginv = np.linalg.inv(g)
    term = (np.transpose(dg, (1, 2, 0)) + np.transpose(dg, (2, 0, 1))
            - np.transpose(dg, (0, 1, 2)))
    # term[s, j, k] = dg[k, s, j] + dg[j, k, s] - dg[s, j, k]
    gamma = 0.5 * np.einsum("is,sjk->ijk", ginv, term)
    gamma_yy = np.einsum("krs,r,s->k", gamma, y, y)
    nonlinear = (np.einsum("ijk,k->ij", gamma, y)
                 - np.einsum("il,ljk,k->ij", ginv, cartan, gamma_yy))
    mix = (np.einsum("ijs,sk->ijk", cartan, nonlinear)
           - np.einsum("jks,si->ijk", cartan, nonlinear)
           + np.einsum("kis,sj->ijk", cartan, nonlinear))
    chern = gamma - np.einsum("li,ijk->ljk", ginv, mix)
    return ginv, gamma, nonlinear, chern


class _Pipeline:
    """Cached per-metric tensor evaluator."""

    def __init__(self, m):
        self.m = m
        self.n = m.dim

    # -- float connection at (x, y) ---------------------------------------
    def raw_connection(self, x, y):
        m, n = self.m, self.n
        ex = _connection_extraction(m)
        alg = ex.alg
        w = m.w_jet(alg, x, y)
        g = w[ex.iy2] * ex.fy2
        dg = np.empty((n, n, n))
        for k in range(n):
            dg[k] = w[ex.ix1y2[k]] * ex.fy2
        cartan = 0.5 * w[ex.iy3] * ex.fy3
        return g, dg, cartan

    def connection(self, x, y):
        g, dg, cartan = self.raw_connection(x, y)
        ginv, gamma, nonlinear, chern = _assemble_connection(g, dg, cartan, y)
        return {"g": g, "ginv": ginv, "dg": dg, "cartan": cartan,
                "gamma": gamma, "nonlinear": nonlinear, "chern": chern}

    # -- ring connection: values plus exact x-derivatives ------------------
    def curvature(self, x, yref):
        m, n = self.m, self.n
        ex = _curvature_extraction(m)
        w = m.w_jet(ex.alg, x, yref)
        R1 = n + 1
        gr = np.empty((R1, n, n))
        gr[0] = w[ex.iy2] * ex.fy2
        dgr = np.empty((R1, n, n, n))
        cr = np.empty((R1, n, n, n))
        cr[0] = 0.5 * w[ex.iy3] * ex.fy3
        for k in range(n):
            dgr[0, k] = w[ex.ix1y2[k]] * ex.fy2
            gr[1 + k] = dgr[0, k]
            cr[1 + k] = 0.5 * w[ex.ix1y3[k]] * ex.fy3
        for l in range(n):
            for k in range(n):
                dgr[1 + l, k] = w[ex.ix2y2[l, k]] * ex.fy2 * ex.fx2[l, k]

        hinv = _ring_inverse(gr)
        term = (np.transpose(dgr, (0, 2, 3, 1)) +
                np.transpose(dgr, (0, 3, 1, 2)) -
                np.transpose(dgr, (0, 1, 2, 3)))
        gamma = 0.5 * _ring_mul_einsum("is,sjk->ijk", hinv, term)
        gamma_yy = np.einsum("rkab,a,b->rk", gamma, yref, yref)
        cn = _ring_mul_einsum("ljk,k->lj", cr, gamma_yy)
        nonlinear = (np.einsum("rijk,k->rij", gamma, yref)
                     - _ring_mul_einsum("il,lj->ij", hinv, cn))
        mix = (_ring_mul_einsum("ijs,sk->ijk", cr, nonlinear)
               - _ring_mul_einsum("jks,si->ijk", cr, nonlinear)
               + _ring_mul_einsum("kis,sj->ijk", cr, nonlinear))
        chern = gamma - _ring_mul_einsum("li,ijk->ljk", hinv, mix)

        chern0 = chern[0]
        dchern = chern[1:]  # dchern[k, i, j, l] = d Gamma^i_jl / dx^k
        riem = (np.einsum("kijl->ijkl", dchern)
                - np.einsum("lijk->ijkl", dchern)
                + np.einsum("ikm,mjl->ijkl", chern0, chern0)
                - np.einsum("ilm,mjk->ijkl", chern0, chern0))
        return chern0, riem


def _pipeline(m):
    return m._cached("pipeline", lambda: _Pipeline(m))


def _reference_direction(m, x):
    """Deterministic generic unit reference for y-independent quantities."""
    u = np.array([1.0 / (1.0 + 0.37 * i) for i in range(m.dim)])
    u /= np.linalg.norm(u)
    f = m.f(x, u)
    if f <= 0:
        raise SlitError("degenerate norm at reference direction")
    return u / f


# ---------------------------------------------------------------------------
# public pointwise operations

def fundamental_tensor(m, v, profile=DEFAULT_PROFILE):
    """Exact y-Hessian of the energy at v; symmetric positive definite."""
    x, y, _ = require_slit(m, v, profile.slit_epsilon)
    ex = _connection_extraction(m)
    w = m.w_jet(ex.alg, x, y)
    g = w[ex.iy2] * ex.fy2
    return FundamentalTensor(x, y, g, np.linalg.inv(g))


def cartan_tensor(m, v, profile=DEFAULT_PROFILE):
    """Exact third y-derivatives of (1/4) F^2, totally symmetric."""
    x, y, _ = require_slit(m, v, profile.slit_epsilon)
    ex = _connection_extraction(m)
    w = m.w_jet(ex.alg, x, y)
    return CartanTensor(x, y, 0.5 * w[ex.iy3] * ex.fy3)


def connection_data(m, v, profile=DEFAULT_PROFILE):
    """Formal Christoffels, nonlinear connection, Chern coefficients at v."""
    x, y, _ = require_slit(m, v, profile.slit_epsilon)
    parts = _pipeline(m).connection(x, y)
    return ConnectionData(x, y, parts["gamma"], parts["nonlinear"],
                          parts["chern"])


def formal_christoffels(m, v, profile=DEFAULT_PROFILE):
    return connection_data(m, v, profile).gamma


def nonlinear_connection(m, v, profile=DEFAULT_PROFILE):
    return connection_data(m, v, profile).nonlinear


def chern_coefficients(m, v, profile=DEFAULT_PROFILE):
    return connection_data(m, v, profile).chern


def is_berwald(m, base_samples=16, dir_samples=8, tol=None,
               profile=DEFAULT_PROFILE, seed=0, classification=None):
    """Sample test for y-independence of the Chern coefficients.

    Residual is the sup over sampled base points of the pairwise sup-norm
    difference of Gamma between sampled directions, normalized by the largest
    coefficient magnitude seen.
    """
    if dir_samples < 2:
        raise InputError("is_berwald needs at least 2 directions per point")
    tol = profile.berwald_tol if tol is None else tol
    gen = sampling.rng(seed, sampling.STREAM_CLASSIFY)
    pipeline = _pipeline(m)
    worst = 0.0
    scale = 0.0
    for _ in range(base_samples):
        x = random_chart_point(m, gen)
        dirs = sampling.random_directions(m.dim, dir_samples, gen)
        gammas = []
        for y in dirs:
            f = m.f(x, y)
            if f <= profile.slit_epsilon:
                continue
            gammas.append(pipeline.connection(x, y / f)["chern"])
        for i in range(1, len(gammas)):
            worst = max(worst, float(np.max(np.abs(gammas[i] - gammas[0]))))
        if gammas:
            scale = max(scale, float(np.max(np.abs(gammas[0]))))
    residual = worst / max(1.0, scale)
    cls = classification or MetricClassification(seed=seed)
    cls.berwald = bool(residual < tol)
    cls.residuals["berwald"] = float(residual)
    cls.samples["berwald"] = int(base_samples * dir_samples)
    return cls


def classify_riemannian(m, samples=64, tol=None, profile=DEFAULT_PROFILE,
                        seed=0, classification=None):
    """True iff the Cartan tensor vanishes (g-orthonormal norm) on samples."""
    tol = profile.riemannian_tol if tol is None else tol
    gen = sampling.rng(seed, sampling.STREAM_CLASSIFY)
    worst = 0.0
    for _ in range(samples):
        x = random_chart_point(m, gen)
        y = sampling.random_directions(m.dim, 1, gen)[0]
        f = m.f(x, y)
        if f <= profile.slit_epsilon:
            continue
        v = TangentVector(x, y / f)
        g = fundamental_tensor(m, v, profile)
        c = cartan_tensor(m, v, profile).array
        norm2 = np.einsum("ijk,lmn,il,jm,kn->", c, c,
                          g.inverse, g.inverse, g.inverse)
        worst = max(worst, math.sqrt(abs(float(norm2))))
    cls = classification or MetricClassification(seed=seed)
    cls.riemannian = bool(worst < tol)
    cls.residuals["riemannian"] = float(worst)
    cls.samples["riemannian"] = int(samples)
    return cls


def ensure_berwald(m, profile=DEFAULT_PROFILE, seed=0):
    """Memoized Berwald gate; raises ClassificationError for non-Berwald input."""
    cls = m._cached(
        "berwald_gate",
        lambda: is_berwald(m, profile=profile, seed=seed))
    if not cls.berwald:
        raise ClassificationError(
            f"{m.label} is not Berwald (residual "
            f"{cls.residuals['berwald']:.3e}); reference-vector ambiguity "
            "makes this operation ill-defined")
    return cls


def hh_curvature(m, x, profile=DEFAULT_PROFILE, reference=None):
    """Affine curvature tensor of the x-only Chern connection (Berwald gate)."""
    ensure_berwald(m, profile)
    x = m.require_point(x)
    yref = _reference_direction(m, x) if reference is None else \
        np.asarray(reference, dtype=float)
    chern0, riem = _pipeline(m).curvature(x, yref)
    return CurvatureData(x, yref, riem, chern0)


def flag_curvature(m, flag, profile=DEFAULT_PROFILE, curvature=None):
    """Flag curvature K(y, V) with all metric contractions at reference y."""
    x, y, _ = require_slit(m, flag.pole, profile.slit_epsilon)
    V = np.asarray(flag.edge, dtype=float)
    g = fundamental_tensor(m, flag.pole, profile).matrix
    gyy = float(y @ g @ y)
    gvv = float(V @ g @ V)
    gyv = float(y @ g @ V)
    denom = gyy * gvv - gyv * gyv
    if denom <= profile.flag_degeneracy_ratio * gyy * gvv:
        raise DegenerateFlagError(
            f"flag denominator {denom:.3e} below threshold")
    data = curvature if curvature is not None else hh_curvature(m, x, profile)
    lowered = np.einsum("is,sjkl->jikl", g, data.tensor)
    numer = float(np.einsum("i,k,j,l,jikl->", V, V, y, y, lowered))
    return numer / denom


def finsler_volume_density(m, x, quadrature_samples=4096, seed=0,
                           profile=DEFAULT_PROFILE):
    """Monte-Carlo estimate of the volume density at x.

    The unit-ball integral of det g reduces exactly along rays (det g is
    0-homogeneous in y) to the spherical average of det g(x, theta) *
    F(x, theta)^(-n); sampling that average gives the estimate and its
    standard error.
    """
    if quadrature_samples < 1000:
        raise InputError("volume density requires at least 1000 samples")
    x = m.require_point(x)
    n = m.dim
    gen = sampling.rng(seed, sampling.STREAM_VOLUME)
    dirs = sampling.random_directions(n, quadrature_samples, gen)
    ex = _connection_extraction(m)
    vals = np.empty(quadrature_samples)
    for k, theta in enumerate(dirs):
        w = m.w_jet(ex.alg, x, theta)
        g = w[ex.iy2] * ex.fy2
        f = m.f(x, theta)
        vals[k] = np.linalg.det(g) / f ** n
    mean = float(np.mean(vals))
    stderr = float(np.std(vals, ddof=1) / math.sqrt(quadrature_samples))
    return {"density": mean, "standard_error": stderr,
            "samples": int(quadrature_samples), "seed": int(seed)}


def classify_metric(m, profile=DEFAULT_PROFILE, samples=256, seed=0):
    """Composite classification: reversible, Riemannian, Berwald."""
    from .metrics import classify_reversible

    cls = MetricClassification(seed=seed)
    classify_reversible(m, samples=samples, tol=profile.reversible_tol,
                        seed=seed, classification=cls)
    classify_riemannian(m, samples=max(16, samples // 4), profile=profile,
                        seed=seed, classification=cls)
    is_berwald(m, base_samples=max(8, samples // 16), dir_samples=8,
               profile=profile, seed=seed, classification=cls)
    if cls.riemannian and not cls.berwald:
        raise ClassificationError(
            "inconsistent classification: Riemannian but not Berwald")
    return cls
