"""Numerical verifiers for nonpositive-curvature properties.

Each verifier is a pure function of (inputs, seed, profile); reports are
plain dataclasses ready for JSON serialization.  Distance evaluations along
grids warm-start each boundary solve from its neighbor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sampling
from .errors import ConvergenceError, InputError
from .geodesics import geodesic_bvp, geodesic_ivp
from .metrics import TangentVector, random_chart_point
from .profile import DEFAULT_PROFILE
from .tensors import Flag, flag_curvature, fundamental_tensor, hh_curvature
from scipy.linalg import eigh


def unit_vector(m, p, direction):
    """Scale a chart direction to F = 1 at p."""
    d = np.asarray(direction, dtype=float)
    f = m.f(np.asarray(p, dtype=float), d)
    if f <= 0:
        raise InputError("cannot normalize a degenerate direction")
    return d / f


class _WarmDistance:
    """Distance evaluator that reuses the previous solve as the next seed."""

    def __init__(self, m, profile):
        self.m = m
        self.profile = profile
        self._last = None
        self._last_chord = None

    def path(self, p, q):
        kwargs = {}
        last = self._last
        chord = float(np.linalg.norm(np.asarray(q) - np.asarray(p)))
        if last is not None:
            states = last.shooting_states
            if states.shape[0] == 1:
                # rescale the seed velocity when the problem size changed
                scale = chord / self._last_chord if self._last_chord else 1.0
                kwargs["seed_velocity"] = states[0, self.m.dim:] * scale
            else:
                kwargs["seed_states"] = states.copy()
        try:
            path = geodesic_bvp(self.m, p, q, self.profile, **kwargs)
        except ConvergenceError:
            path = geodesic_bvp(self.m, p, q, self.profile)  # cold retry
        self._last = path
        self._last_chord = chord
        return path

    def __call__(self, p, q):
        if np.allclose(p, q, atol=1e-15):
            return 0.0
        return self.path(p, q).speed


# ---------------------------------------------------------------------------
# distance convexity

@dataclass(eq=False)
class ConvexityReport:
    ts: np.ndarray
    distances: np.ndarray
    second_differences: np.ndarray
    min_second_difference: float
    tolerance: float
    verdict: bool
    failures: list = field(default_factory=list)

    def to_dict(self):
        return {
            "ts": self.ts.tolist(),
            "distances": self.distances.tolist(),
            "second_differences": self.second_differences.tolist(),
            "min_second_difference": self.min_second_difference,
            "tolerance": self.tolerance,
            "verdict": bool(self.verdict),
            "failures": self.failures,
        }


def check_distance_convexity(m, alpha, beta, grid=7, profile=DEFAULT_PROFILE):
    """Midpoint-convexity test of t -> d(alpha(t), beta(t)) on a grid.

    The verdict passes when every discrete second difference is above
    -tolerance, with the tolerance scaled by the distance magnitude.
    """
    ts = _resolve_grid(alpha, beta, grid)
    dist = _WarmDistance(m, profile)
    values = np.full(ts.shape, np.nan)
    failures = []
    for i, t in enumerate(ts):
        try:
            values[i] = dist(alpha.position(t), beta.position(t))
        except ConvergenceError as exc:
            failures.append({"t": float(t), "error": str(exc)})
    if failures and np.isnan(values).sum() > len(ts) // 2:
        raise ConvergenceError(
            f"convexity check lost {len(failures)} of {len(ts)} nodes",
            residual=None)
    second = values[2:] - 2.0 * values[1:-1] + values[:-2]
    second = second[~np.isnan(second)]
    if second.size == 0:
        raise ConvergenceError("no usable convexity triples")
    scale = float(np.nanmax(np.abs(values))) + 1.0
    tol = profile.convexity_tol * scale
    min_second = float(np.min(second))
    return ConvexityReport(ts, values, second, min_second, tol,
                           min_second >= -tol, failures)


def _resolve_grid(alpha, beta, grid):
    lo = max(alpha.t_min, beta.t_min)
    hi = min(alpha.t_max, beta.t_max)
    if hi <= lo:
        raise InputError("geodesics have no common time interval")
    if np.isscalar(grid):
        return np.linspace(lo, hi, int(grid))
    ts = np.asarray(grid, dtype=float)
    if ts.min() < lo - 1e-12 or ts.max() > hi + 1e-12:
        raise InputError("grid leaves the common time interval")
    return ts


# ---------------------------------------------------------------------------
# angle

@dataclass(eq=False)
class AngleReport:
    p: np.ndarray
    u: np.ndarray
    v: np.ndarray
    ts: np.ndarray
    ratios: np.ndarray
    limit: float
    chord: float
    discrepancy: float
    within_bound: bool

    def to_dict(self):
        return {"p": self.p.tolist(), "u": self.u.tolist(),
                "v": self.v.tolist(), "ts": self.ts.tolist(),
                "ratios": self.ratios.tolist(), "limit": self.limit,
                "chord": self.chord, "discrepancy": self.discrepancy,
                "within_bound": bool(self.within_bound)}


def _neville_to_zero(ts, vals):
    """Polynomial extrapolation of (ts, vals) to t = 0, stall-guarded."""
    n = len(ts)
    tab = list(vals)
    best = tab[-1]
    best_change = np.inf
    for order in range(1, n):
        new = []
        for i in range(n - order):
            t0, t1 = ts[i], ts[i + order]
            new.append(((0.0 - t1) * tab[i] + (t0 - 0.0) * tab[i + 1])
                       / (t0 - t1))
        tab = new
        change = abs(tab[-1] - best)
        if change < best_change:
            best_change = change
            best = tab[-1]
    return best


def angle(m, p, u, v, profile=DEFAULT_PROFILE):
    """Chord angle between unit vectors u, v at p.

    Evaluates d(c1(t), c2(t))/t on a halving ladder, extrapolates to t -> 0,
    and reports the Minkowski chord norm F_p(v - u) with the discrepancy.
    """
    p = m.require_point(np.asarray(p, dtype=float))
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    for w in (u, v):
        f = m.f(p, w)
        if abs(f - 1.0) > 1e-8:
            raise InputError(f"angle arguments must be unit vectors, F = {f}")
    chord = 0.0 if np.allclose(u, v, atol=1e-14) else m.f(p, v - u)
    if np.allclose(u, v, atol=1e-14):
        ts = np.array([profile.angle_base_step])
        return AngleReport(p, u, v, ts, np.zeros(1), 0.0, 0.0, 0.0, True)
    t0 = profile.angle_base_step
    for _ in range(4):
        try:
            ts, ratios = _angle_ladder(m, p, u, v, t0, profile)
            break
        except ConvergenceError:
            t0 *= 0.5  # fall back to a smaller base step
    else:
        raise ConvergenceError("angle ladder failed at every base step")
    limit = float(_neville_to_zero(ts, ratios))
    return AngleReport(p, u, v, ts, ratios, limit, chord,
                       abs(limit - chord), limit <= 2.0 + 1e-9)


def _angle_ladder(m, p, u, v, t0, profile):
    levels = profile.angle_levels
    c1 = geodesic_ivp(m, TangentVector(p, u), (0.0, t0), profile)
    c2 = geodesic_ivp(m, TangentVector(p, v), (0.0, t0), profile)
    dist = _WarmDistance(m, profile)
    ts = np.array([t0 * 2.0 ** (-k) for k in range(levels)])
    ratios = np.empty(levels)
    for k, t in enumerate(ts):
        ratios[k] = dist(c1.position(t), c2.position(t)) / t
    return ts, ratios


# ---------------------------------------------------------------------------
# chord monotonicity

@dataclass(eq=False)
class ChordReport:
    ts: np.ndarray
    ratios: np.ndarray
    chord: float
    verdict: bool
    worst_ratio_drop: float
    worst_chord_deficit: float

    def to_dict(self):
        return {"ts": self.ts.tolist(), "ratios": self.ratios.tolist(),
                "chord": self.chord, "verdict": bool(self.verdict),
                "worst_ratio_drop": self.worst_ratio_drop,
                "worst_chord_deficit": self.worst_chord_deficit}


def check_chord_monotonicity(m, p, u, v, t_grid=None, profile=DEFAULT_PROFILE):
    """d(c1(t), c2(t))/t must be nondecreasing and >= F_p(v - u) - tol."""
    p = m.require_point(np.asarray(p, dtype=float))
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    ts = np.asarray(t_grid if t_grid is not None
                    else np.geomspace(0.05, 1.6, 6), dtype=float)
    span = float(ts.max())
    c1 = geodesic_ivp(m, TangentVector(p, u), (0.0, span), profile)
    c2 = geodesic_ivp(m, TangentVector(p, v), (0.0, span), profile)
    dist = _WarmDistance(m, profile)
    ratios = np.array([dist(c1.position(t), c2.position(t)) / t for t in ts])
    chord = m.f(p, v - u)
    tol = profile.verifier_tol * (1.0 + chord)
    drops = np.maximum(ratios[:-1] - ratios[1:], 0.0)
    deficits = np.maximum(chord - ratios, 0.0)
    worst_drop = float(np.max(drops)) if drops.size else 0.0
    worst_deficit = float(np.max(deficits))
    verdict = worst_drop <= tol and worst_deficit <= tol
    return ChordReport(ts, ratios, chord, verdict, worst_drop, worst_deficit)


# ---------------------------------------------------------------------------
# angle monotonicity toward a far point

@dataclass(eq=False)
class AngleMonotonicityReport:
    ts: np.ndarray
    angles: np.ndarray
    verdict: bool
    worst_drop: float
    far_distance: float
    proxy_ok: bool

    def to_dict(self):
        return {"ts": self.ts.tolist(), "angles": self.angles.tolist(),
                "verdict": bool(self.verdict), "worst_drop": self.worst_drop,
                "far_distance": self.far_distance,
                "proxy_ok": bool(self.proxy_ok)}


def check_angle_monotonicity_to_infinity(m, gamma, far_point, t_grid=None,
                                         profile=DEFAULT_PROFILE):
    """Angles from the flowed velocity to the far-point direction must grow.

    The far point stands in for a boundary point; a proxy-quality flag warns
    when it is closer than far_point_factor times the geodesic span.
    """
    far = m.require_point(np.asarray(far_point, dtype=float))
    ts = np.asarray(t_grid if t_grid is not None
                    else np.linspace(gamma.t_min, gamma.t_max, 6),
                    dtype=float)
    span = float(ts.max() - ts.min())
    dist = _WarmDistance(m, profile)
    angles = np.empty(ts.shape)
    far_distance = None
    for i, t in enumerate(ts):
        x = gamma.position(t)
        vel = gamma.velocity(t)
        conn = dist.path(x, far)
        if far_distance is None:
            far_distance = conn.speed
        w = unit_vector(m, x, conn.velocity(0.0))
        t_unit = unit_vector(m, x, vel)
        angles[i] = m.f(x, w - t_unit)
    proxy_ok = far_distance >= profile.far_point_factor * max(span, 1e-12)
    drops = np.maximum(angles[:-1] - angles[1:], 0.0)
    worst = float(np.max(drops)) if drops.size else 0.0
    tol = profile.verifier_tol * (1.0 + float(np.max(angles)))
    return AngleMonotonicityReport(ts, angles, worst <= tol, worst,
                                   float(far_distance), proxy_ok)


# ---------------------------------------------------------------------------
# Tits distance estimate

@dataclass(eq=False)
class TitsReport:
    horizons: np.ndarray
    ratios: np.ndarray
    limit: float
    ratios_second_base: np.ndarray
    limit_second_base: float
    base_discrepancy: float
    convergence_gaps: np.ndarray

    def to_dict(self):
        return {"horizons": self.horizons.tolist(),
                "ratios": self.ratios.tolist(), "limit": self.limit,
                "ratios_second_base": self.ratios_second_base.tolist(),
                "limit_second_base": self.limit_second_base,
                "base_discrepancy": self.base_discrepancy,
                "convergence_gaps": self.convergence_gaps.tolist()}


def _ray_ratios(m, p, u, v, horizons, profile):
    top = float(max(horizons))
    a = geodesic_ivp(m, TangentVector(p, u), (0.0, top), profile)
    b = geodesic_ivp(m, TangentVector(p, v), (0.0, top), profile)
    ds = np.empty(len(horizons))
    for i, T in enumerate(horizons):
        ds[i] = geodesic_bvp(m, a.position(T), b.position(T), profile).speed
    return a, b, ds


def _slope_limit(horizons, ds):
    if len(horizons) == 1:
        return float(ds[0] / horizons[0])
    return float((ds[-1] - ds[-2]) / (horizons[-1] - horizons[-2]))


def tits_distance_estimate(m, p, u, v, horizons=None, second_base=None,
                           profile=DEFAULT_PROFILE):
    """Growth rate of d(alpha(t), beta(t)); finite-horizon boundary metric.

    Reports the raw ratios d(T)/T, a slope-extrapolated limit (the raw ratio
    converges only like 1/T: d(T) = limit*T + const + o(1)), and the same
    limit recomputed from a second base point whose rays aim at the farthest
    sample points of the first pair.
    """
    p = m.require_point(np.asarray(p, dtype=float))
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    horizons = np.asarray(sorted(horizons if horizons is not None
                                 else profile.tits_horizons), dtype=float)
    for w in (u, v):
        if abs(m.f(p, w) - 1.0) > 1e-8:
            raise InputError("tits estimate needs unit directions")
    a, b, ds = _ray_ratios(m, p, u, v, horizons, profile)
    ratios = ds / horizons
    limit = _slope_limit(horizons, ds)
    # second base point: aim at the farthest sample points of the first rays
    top = float(horizons[-1])
    if second_base is None:
        second_base = p + 0.12 * np.ones(m.dim) / np.sqrt(m.dim)
    p2 = m.require_point(np.asarray(second_base, dtype=float))
    u2 = unit_vector(m, p2,
                     geodesic_bvp(m, p2, a.position(top), profile)
                     .velocity(0.0))
    v2 = unit_vector(m, p2,
                     geodesic_bvp(m, p2, b.position(top), profile)
                     .velocity(0.0))
    _, _, ds2 = _ray_ratios(m, p2, u2, v2, horizons, profile)
    ratios2 = ds2 / horizons
    limit2 = _slope_limit(horizons, ds2)
    gaps = np.abs(np.diff(ratios))
    return TitsReport(horizons, ratios, limit, ratios2, limit2,
                      abs(limit - limit2), gaps)


# ---------------------------------------------------------------------------
# flat strip detection

@dataclass(eq=False)
class FlatStripReport:
    ts: np.ndarray
    widths: np.ndarray
    width_variation: float
    parallel: bool
    geodesic_deviation: float | None
    curvature_residual: float | None
    strip: bool

    def to_dict(self):
        return {"ts": self.ts.tolist(), "widths": self.widths.tolist(),
                "width_variation": self.width_variation,
                "parallel": bool(self.parallel),
                "geodesic_deviation": self.geodesic_deviation,
                "curvature_residual": self.curvature_residual,
                "strip": bool(self.strip)}


def detect_flat_strip(m, alpha, beta, grid=9, s_samples=5,
                      profile=DEFAULT_PROFILE):
    """Parallel test plus the connecting-variation flatness construction.

    A strip verdict requires (1) constant width, (2) the cross curves of the
    connecting variation to be geodesics, (3) vanishing flag curvature on
    the spanned two-planes.
    """
    ts = _resolve_grid(alpha, beta, grid)
    dist = _WarmDistance(m, profile)
    connectors = []
    widths = np.empty(ts.shape)
    for i, t in enumerate(ts):
        path = dist.path(alpha.position(t), beta.position(t))
        connectors.append(path)
        widths[i] = path.speed
    width_var = float(np.max(widths) - np.min(widths))
    mean_width = float(np.mean(widths))
    parallel = width_var <= profile.verifier_tol * (1.0 + mean_width)
    if not parallel:
        return FlatStripReport(ts, widths, width_var, False, None, None,
                               False)
    # cross curves: for each interior s, the points t -> Sigma(t, s) must lie
    # on the geodesic joining the curve's own endpoints
    svals = np.linspace(0.0, 1.0, s_samples + 2)[1:-1]
    deviation = 0.0
    curvature_residual = 0.0
    for s in svals:
        pts = np.array([c.position(s) for c in connectors])
        cross = geodesic_bvp(m, pts[0], pts[-1], profile)
        # affine time: cross(0) = first node, cross(1) = last node
        taus = (ts - ts[0]) / (ts[-1] - ts[0])
        for tau, pt in zip(taus, pts):
            deviation = max(deviation,
                            float(np.linalg.norm(cross.position(tau) - pt)))
        for tau in taus[:: max(1, len(taus) // 4)]:
            x = cross.position(tau)
            t_dir = cross.velocity(tau)
            s_mid = min(max(s, 0.05), 0.95)
            idx = int(np.argmin(np.abs(taus - tau)))
            s_dir = connectors[idx].velocity(s_mid)
            pole = TangentVector(x, unit_vector(m, x, t_dir))
            try:
                K = flag_curvature(m, Flag(pole, s_dir), profile)
            except Exception:
                continue
            curvature_residual = max(curvature_residual, abs(float(K)))
    dev_tol = profile.verifier_tol * (1.0 + mean_width) * 10.0
    strip = (deviation <= dev_tol
             and curvature_residual <= profile.verifier_tol)
    return FlatStripReport(ts, widths, width_var, True, float(deviation),
                           float(curvature_residual), strip)


# ---------------------------------------------------------------------------
# uniformity constant

@dataclass(eq=False)
class UniformityReport:
    points: np.ndarray
    constants: np.ndarray
    global_max: float
    spread: float

    def to_dict(self):
        return {"points": self.points.tolist(),
                "constants": self.constants.tolist(),
                "global_max": self.global_max, "spread": self.spread}


def uniformity_constant(m, base_points=4, pair_samples=64, seed=0,
                        profile=DEFAULT_PROFILE):
    """C0(p): extreme norm-comparison constant over sampled direction pairs.

    For each pair (w, v) the extreme generalized eigenvalues of (g_w, g_v)
    bound the two-sided norm ratios; Berwald metrics show base-point
    independent values.
    """
    if pair_samples < 64:
        raise InputError("uniformity_constant needs >= 64 direction pairs")
    gen = sampling.rng(seed, sampling.STREAM_UNIFORMITY)
    if np.isscalar(base_points):
        pts = np.array([random_chart_point(m, gen)
                        for _ in range(int(base_points))])
    else:
        pts = np.asarray(base_points, dtype=float)
    count = max(16, int(np.ceil((1 + np.sqrt(1 + 8 * pair_samples)) / 2)))
    dirs = sampling.sphere_directions(m.dim, count, seed,
                                      sampling.STREAM_UNIFORMITY)
    consts = np.empty(len(pts))
    for pi, p in enumerate(pts):
        p = m.require_point(p)
        gs = []
        for d in dirs:
            f = m.f(p, d)
            gs.append(fundamental_tensor(
                m, TangentVector(p, d / f), profile).matrix)
        c0 = 1.0
        pairs = 0
        for i in range(len(gs)):
            for j in range(i + 1, len(gs)):
                lams = eigh(gs[i], gs[j], eigvals_only=True)
                c0 = max(c0, float(np.sqrt(lams[-1])),
                         float(np.sqrt(1.0 / lams[0])))
                pairs += 1
                if pairs >= pair_samples:
                    break
            if pairs >= pair_samples:
                break
        consts[pi] = c0
    return UniformityReport(pts, consts, float(np.max(consts)),
                            float(np.max(consts) - np.min(consts)))
