"""Finsler metric definitions: catalog, expressions, products, validation.

A :class:`MetricDefinition` is immutable; classification results and compiled
evaluation programs are memoized behind a lock, so definitions are safe to
share across threads.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from . import dsl, jets, sampling
from .errors import ChartError, InputError, SlitError


@dataclass(frozen=True)
class ChartSpec:
    """Validity region of the single global chart: a ball or all of R^n."""

    radius: float | None = None

    def contains(self, x):
        if self.radius is None:
            return bool(np.all(np.isfinite(x)))
        return bool(np.all(np.isfinite(x)) and
                    float(np.linalg.norm(x)) < self.radius)

    def core_bound(self):
        """Radius of the sampling region used by validators."""
        return 0.8 * self.radius if self.radius is not None else 0.8


@dataclass(frozen=True, eq=False)
class TangentVector:
    """A base point plus vector components; argument of pointwise tensor ops."""

    base: np.ndarray
    components: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "base", np.asarray(self.base, dtype=float))
        object.__setattr__(self, "components",
                           np.asarray(self.components, dtype=float))
        if self.base.shape != self.components.shape or self.base.ndim != 1:
            raise InputError("base and components must be 1-d of equal length")


@dataclass
class MetricClassification:
    """Flags plus the residuals and sample counts that produced them."""

    reversible: bool | None = None
    riemannian: bool | None = None
    berwald: bool | None = None
    residuals: dict = field(default_factory=dict)
    samples: dict = field(default_factory=dict)
    seed: int = 0


class MetricDefinition:
    """Immutable description of a Finsler metric F(x, y) on one chart.

    Every definition, including catalog entries and products, lowers to a
    single expression tree for F; the jet engine differentiates that tree.
    """

    def __init__(self, kind, dim, tree, label, chart=None, params=None,
                 factors=None, catalog_name=None, source=None):
        self.kind = kind                      # "catalog" | "expr" | "product"
        self.dim = int(dim)
        self.tree = tree
        self.label = label
        self.chart = chart or ChartSpec()
        self.params = dict(params or {})
        self.factors = tuple(factors or ())
        self.catalog_name = catalog_name
        self.source = source
        # reentrant: cached builders may consult other cached entries
        self._lock = threading.RLock()
        self._cache = {}

    def __repr__(self):
        return f"MetricDefinition({self.label!r}, dim={self.dim})"

    # -- cached derived objects -------------------------------------------
    def _cached(self, key, build):
        with self._lock:
            if key not in self._cache:
                self._cache[key] = build()
            return self._cache[key]

    @property
    def program(self):
        return self._cached("program",
                            lambda: jets.compile_program(self.tree, self.dim))

    @property
    def uses_x(self):
        """Structural x-dependence; False implies a locally Minkowski metric."""
        return self._cached("uses_x", lambda: _tree_uses_x(self.tree))

    # -- evaluation ---------------------------------------------------------
    def require_point(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise InputError(f"point must have {self.dim} coordinates")
        if not self.chart.contains(x):
            raise ChartError(f"point {x.tolist()} outside chart of {self.label}")
        return x

    def f(self, x, y):
        """F(x, y) without chart validation (hot path)."""
        return jets.eval_float(self.program, x, y)

    def f_jet(self, alg, x, y):
        return jets.eval_jet(self.program, alg, x, y)

    def w_jet(self, alg, x, y):
        """Jet of the energy (1/2) F^2."""
        return jets.half_square(alg, self.f_jet(alg, x, y))


def _tree_uses_x(node):
    if node.kind == dsl.COORD_X:
        return True
    return any(_tree_uses_x(c) for c in node.children)


def _shift_coordinates(node, offset):
    if node.kind in (dsl.COORD_X, dsl.COORD_Y):
        return dsl.ExprNode(node.kind, (), node.value + offset, None)
    return dsl.ExprNode(node.kind,
                        tuple(_shift_coordinates(c, offset)
                              for c in node.children),
                        node.value, None)


def _squared(node):
    # F enters everything through F^2; peel a top-level sqrt when present
    if node.kind == dsl.SQRT:
        return node.children[0]
    return dsl.ExprNode(dsl.POW, (node,), 2.0, None)


# ---------------------------------------------------------------------------
# catalog

def _euclidean_source(n):
    return "sqrt(" + " + ".join(f"y{i}^2" for i in range(n)) + ")"


_CATALOG_BUILDERS = {}


def _catalog(name):
    def deco(fn):
        _CATALOG_BUILDERS[name] = fn
        return fn
    return deco


@_catalog("euclidean")
def _build_euclidean(params):
    n = int(params.get("n", 2))
    if n < 1:
        raise InputError("euclidean requires n >= 1")
    expr = dsl.parse_expr(_euclidean_source(n), n)
    return expr, ChartSpec(), f"euclidean({n})"


@_catalog("minkowski_quartic")
def _build_quartic(params):
    lam = float(params.get("lam", 1.0))
    if lam <= 0.0:
        raise InputError("minkowski_quartic requires lam > 0")
    src = "sqrt(sqrt(y0^4 + y1^4) + lam*(y0^2 + y1^2))"
    expr = dsl.parse_expr(src, 2, {"lam": lam})
    return expr, ChartSpec(), f"minkowski_quartic(lam={lam:g})"


@_catalog("poincare_disk")
def _build_poincare(params):
    src = "2*sqrt(y0^2 + y1^2)/(1 - x0^2 - x1^2)"
    expr = dsl.parse_expr(src, 2)
    return expr, ChartSpec(radius=1.0), "poincare_disk"


@_catalog("round_sphere_chart")
def _build_sphere(params):
    src = "2*sqrt(y0^2 + y1^2)/(1 + x0^2 + x1^2)"
    expr = dsl.parse_expr(src, 2)
    return expr, ChartSpec(), "round_sphere_chart"


@_catalog("randers_flat")
def _build_randers(params):
    b = np.asarray(params.get("b", (0.3, 0.0)), dtype=float)
    if b.shape != (2,):
        raise InputError("randers_flat requires a length-2 drift vector b")
    if np.linalg.norm(b) >= 1.0:
        raise InputError("randers_flat requires |b| < 1")
    src = "sqrt(y0^2 + y1^2) + b0*y0 + b1*y1"
    expr = dsl.parse_expr(src, 2, {"b0": b[0], "b1": b[1]})
    return expr, ChartSpec(), f"randers_flat(b=({b[0]:g},{b[1]:g}))"


@_catalog("locally_minkowski")
def _build_locally_minkowski(params):
    source = params.get("expr")
    if not source:
        raise InputError("locally_minkowski requires an 'expr' parameter")
    dim = int(params.get("dim", 2))
    extra = {k: v for k, v in params.items() if k not in ("expr", "dim")}
    expr = dsl.parse_expr(source, dim, extra)
    if expr.uses_x():
        raise InputError("locally_minkowski expression must not reference x")
    return expr, ChartSpec(), f"locally_minkowski({source})"


def catalog_metric(name, params=None, validate=True, seed=0):
    """Build a validated catalog metric.

    Validation certifies the Minkowski-norm conditions at 32 random base
    points (positive-definite Hessian of the energy on sampled directions).
    """
    params = dict(params or {})
    builder = _CATALOG_BUILDERS.get(name)
    if builder is None:
        raise InputError(
            f"unknown catalog metric {name!r}; known: "
            + ", ".join(sorted(_CATALOG_BUILDERS)))
    expr, chart, label = builder(params)
    m = MetricDefinition("catalog", expr.dim, expr.root, label, chart,
                         params=params, catalog_name=name,
                         source=expr.source)
    if validate:
        _validate_metric(m, seed=seed)
    return m


def expression_metric(source, dim, params=None, chart_radius=None,
                      label=None, validate=True, seed=0):
    """Build a metric from DSL source text."""
    expr = dsl.parse_expr(source, dim, params)
    m = MetricDefinition("expr", dim, expr.root,
                         label or f"expr({source})",
                         ChartSpec(radius=chart_radius), params=expr.params,
                         source=source)
    if validate:
        _validate_metric(m, seed=seed)
    return m


def product_metric(a, b, validate=True, seed=0):
    """Product metric F = sqrt(F_a^2 + F_b^2) on the product chart.

    The product of Berwald factors is Berwald; these supply the rank >= 2
    test spaces.
    """
    n = a.dim + b.dim
    left = _squared(a.tree)
    right = _squared(_shift_coordinates(b.tree, a.dim))
    tree = dsl.ExprNode(
        dsl.SQRT, (dsl.ExprNode(dsl.ADD, (left, right), None, None),),
        None, None)
    # product chart: keep the bounded factor's constraint (applied blockwise)
    chart = _ProductChart(a.chart, b.chart, a.dim)
    m = MetricDefinition("product", n, tree, f"{a.label} x {b.label}",
                         chart, factors=(a, b))
    if validate:
        _validate_metric(m, seed=seed)
    return m


class _ProductChart(ChartSpec):
    """Blockwise chart: each factor's constraint on its own coordinates."""

    def __init__(self, chart_a, chart_b, split):
        object.__setattr__(self, "radius", None)
        object.__setattr__(self, "chart_a", chart_a)
        object.__setattr__(self, "chart_b", chart_b)
        object.__setattr__(self, "split", split)

    def contains(self, x):
        return (self.chart_a.contains(x[:self.split])
                and self.chart_b.contains(x[self.split:]))

    def core_bound(self):
        return min(self.chart_a.core_bound(), self.chart_b.core_bound())


# ---------------------------------------------------------------------------
# pointwise operations

def norm(m, v):
    """F(x, y); zero iff y = 0 for a valid Minkowski norm."""
    x = m.require_point(v.base)
    y = np.asarray(v.components, dtype=float)
    if y.shape != (m.dim,):
        raise InputError(f"vector must have {m.dim} components")
    return m.f(x, y)


def require_slit(m, v, slit_epsilon):
    """Validate a tangent vector for slit-bundle operations; returns (x, y, F)."""
    x = m.require_point(v.base)
    y = np.asarray(v.components, dtype=float)
    value = m.f(x, y)
    if value <= slit_epsilon:
        raise SlitError(
            f"F(x, y) = {value:.3e} below slit threshold {slit_epsilon:.1e}")
    return x, y, value


def hessian_matrix(m, x, y):
    """Symmetrized y-Hessian of the energy (1/2)F^2 at (x, y)."""
    alg = jets.metric_algebra(m.dim)
    w = m.w_jet(alg, x, y)
    n = m.dim
    g = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            c = w[alg.idx(y_exp=(i, j))]
            g[i, j] = g[j, i] = (2.0 * c) if i == j else c
    return g


def certify_minkowski_norm(m, x, samples=256, seed=0,
                           degenerate_ratio=1e-8):
    """Check positive definiteness of the energy Hessian over sampled rays.

    Returns the smallest eigenvalue seen and a witness direction for any
    failure.  Differentiation domain errors are reported as witnesses, not
    swallowed.
    """
    if samples < 1:
        raise InputError("samples must be >= 1")
    x = m.require_point(x)
    dirs = sampling.sphere_directions(m.dim, samples, seed,
                                      sampling.STREAM_CERTIFY)
    min_eig = np.inf
    max_eig = 0.0
    witnesses = []
    for y in dirs:
        try:
            g = hessian_matrix(m, x, y)
            eigs = np.linalg.eigvalsh(g)
        except Exception as exc:  # noqa: BLE001 - recorded, not swallowed
            witnesses.append({"y": y.tolist(), "error": str(exc)})
            continue
        min_eig = min(min_eig, float(eigs[0]))
        max_eig = max(max_eig, float(eigs[-1]))
        if eigs[0] <= degenerate_ratio * max(eigs[-1], 1e-300):
            witnesses.append({"y": y.tolist(), "min_eigenvalue": float(eigs[0])})
    ok = (not witnesses) and min_eig > degenerate_ratio * max_eig
    return {"ok": ok, "min_hessian_eigenvalue": float(min_eig),
            "max_hessian_eigenvalue": float(max_eig),
            "witnesses": witnesses, "samples": int(samples), "seed": int(seed)}


def random_chart_point(m, generator, shrink=1.0):
    """Uniform sample from the chart's core region (ball-aware)."""
    bound = m.chart.core_bound() * shrink
    if getattr(m.chart, "radius", None) is None and m.kind != "product":
        return generator.uniform(-bound, bound, m.dim)
    # ball charts (and products containing one): sample per-factor balls
    if isinstance(m.chart, _ProductChart):
        a, b = m.factors
        return np.concatenate([random_chart_point(a, generator, shrink),
                               random_chart_point(b, generator, shrink)])
    direction = generator.standard_normal(m.dim)
    nrm = np.linalg.norm(direction)
    if nrm < 1e-12:
        return np.zeros(m.dim)
    radius = bound * generator.uniform(0.0, 1.0) ** (1.0 / m.dim)
    return direction / nrm * radius


def _validate_metric(m, seed=0, base_points=32, directions=32):
    """Catalog/product validation: certify the norm at random base points."""
    gen = sampling.rng(seed, sampling.STREAM_CERTIFY)
    for k in range(base_points):
        x = random_chart_point(m, gen) if m.uses_x else np.zeros(m.dim)
        report = certify_minkowski_norm(m, x, samples=directions, seed=seed)
        if not report["ok"]:
            raise InputError(
                f"{m.label}: Minkowski-norm certification failed at "
                f"x={x.tolist()}: {report['witnesses'][:1]}")
        if not m.uses_x:
            break  # tangent spaces identical, one base point suffices


def classify_reversible(m, samples=256, tol=1e-9, seed=0,
                        classification=None):
    """Absolute-homogeneity test at lambda = -1; updates the classification."""
    gen = sampling.rng(seed, sampling.STREAM_CLASSIFY)
    worst = 0.0
    for _ in range(samples):
        x = random_chart_point(m, gen)
        y = gen.standard_normal(m.dim)
        if np.linalg.norm(y) < 1e-9:
            continue
        f = m.f(x, y)
        if f <= 0.0:
            continue
        worst = max(worst, abs(m.f(x, -y) - f) / f)
    cls = classification or MetricClassification(seed=seed)
    cls.reversible = bool(worst < tol)
    cls.residuals["reversible"] = float(worst)
    cls.samples["reversible"] = int(samples)
    return cls
