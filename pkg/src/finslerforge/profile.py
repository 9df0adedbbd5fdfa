"""Every numerical threshold in one auditable, serializable record."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .errors import InputError


@dataclass(frozen=True)
class ToleranceProfile:
    """Numerical thresholds; all strictly positive.

    Defaults are chosen so that exactly-flat/Berwald structures land orders
    of magnitude inside their cutoffs while genuinely curved or y-dependent
    structures land orders of magnitude outside.
    """

    # slit tangent bundle guard on F(x, y)
    slit_epsilon: float = 1e-9
    # adaptive integrator
    atol: float = 1e-10
    rtol: float = 1e-10
    # finite-difference oracle step (tests and variation oracles)
    fd_step: float = 1e-3
    variation_step: float = 1e-4
    # classifier cutoffs
    berwald_tol: float = 1e-7
    riemannian_tol: float = 1e-8
    reversible_tol: float = 1e-9
    degenerate_hessian_ratio: float = 1e-8
    # flag nondegeneracy: denominator > ratio * g(y,y) g(V,V)
    flag_degeneracy_ratio: float = 1e-10
    # rank estimation
    rank_svd_cutoff: float = 1e-6
    rank_horizon: float = 6.0
    rank_quadrature_points: int = 129
    # boundary-value solver
    bvp_tol: float = 1e-10
    bvp_max_iterations: int = 40
    bvp_multistarts: int = 8
    bvp_segment_length: float = 4.0
    bvp_fd_step: float = 1e-6
    # verifiers
    verifier_tol: float = 1e-6
    convexity_tol: float = 1e-7
    rauch_slack: float = 1e-8
    angle_base_step: float = 0.1
    angle_levels: int = 7
    far_point_factor: float = 100.0
    tits_horizons: tuple = (2.5, 5.0, 10.0, 20.0)

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name == "tits_horizons":
                if not val or any(h <= 0 for h in val):
                    raise InputError("tits_horizons must be positive")
                object.__setattr__(self, f.name, tuple(float(h) for h in val))
                continue
            if isinstance(val, bool) or val is None:
                raise InputError(f"profile field {f.name} must be numeric")
            if val <= 0:
                raise InputError(f"profile field {f.name} must be positive")

    def replace(self, **overrides):
        data = asdict(self)
        unknown = set(overrides) - set(data)
        if unknown:
            raise InputError(f"unknown profile fields: {sorted(unknown)}")
        data.update(overrides)
        return ToleranceProfile(**data)

    def to_dict(self):
        data = asdict(self)
        data["tits_horizons"] = list(data["tits_horizons"])
        return data


DEFAULT_PROFILE = ToleranceProfile()


def profile_from_dict(data):
    """Build a profile from a mapping, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise InputError("profile document must be a JSON object")
    known = {f.name for f in fields(ToleranceProfile)}
    unknown = set(data) - known
    if unknown:
        raise InputError(f"unknown profile keys: {sorted(unknown)}")
    if "tits_horizons" in data:
        data = dict(data)
        data["tits_horizons"] = tuple(data["tits_horizons"])
    return ToleranceProfile(**data)
