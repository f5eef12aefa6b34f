"""Semiflows and the composition semigroups they induce, P(t)f = f o psi_t."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NonFiniteState
from .semigroup import SemigroupOperator
from .weighted_space import SampleGrid, ScalarFunction, WeightFunction, as_points

VectorField = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Semiflow:
    """psi(t, x) on batches of states, either in closed form or by fixed-step RK4."""

    psi: Callable[[float, np.ndarray], np.ndarray]
    weight: WeightFunction
    backend: str = "closed_form"
    field: Optional[VectorField] = None
    step: Optional[float] = None
    name: str = "flow"

    def __call__(self, t: float, x) -> np.ndarray:
        if t < 0:
            raise ValueError("semiflows are only defined for t >= 0")
        return self.psi(float(t), as_points(x, self.weight.dim))

    def growth_ratio(self, t: float, x) -> np.ndarray:
        """rho(psi_t(x)) / rho(x); shared by C_t profiles and the P(t)rho surrogate."""
        pts = as_points(x, self.weight.dim)
        w = self.weight
        moved = self(t, pts)
        if w.log_func is not None:
            with np.errstate(over="ignore"):
                return np.exp(w.log(moved) - w.log(pts))
        return w(moved) / w(pts)


def closed_form_flow(psi: Callable[[float, np.ndarray], np.ndarray], w: WeightFunction,
                     name: str = "flow") -> Semiflow:
    return Semiflow(psi=psi, weight=w, backend="closed_form", name=name)


def _rk4(field: VectorField, x: np.ndarray, h: float, n: int) -> np.ndarray:
    for _ in range(n):
        k1 = field(x)
        k2 = field(x + 0.5 * h * k1)
        k3 = field(x + 0.5 * h * k2)
        k4 = field(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            bad = np.flatnonzero(~np.all(np.isfinite(x), axis=1))
            raise NonFiniteState(f"RK4 integration left the reals for {bad.size} start points")
    return x


def flow_from_field(field: VectorField, method: str = "rk4", step: float = 1e-3,
                    w: Optional[WeightFunction] = None, name: str = "ode") -> Semiflow:
    """Solve x' = field(x) with fixed-step RK4.

    ``psi(t, .)`` takes exactly ``round(t / step)`` steps, so
    psi(t1, psi(t2, x)) and psi(t1 + t2, x) perform the same arithmetic
    whenever t1 and t2 are multiples of the step.
    """
    if method != "rk4":
        raise ValueError(f"unsupported integrator {method!r}")
    if step <= 0:
        raise ValueError("step must be positive")
    if w is None:
        raise ValueError("a weight function is required")

    def psi(t, x):
        return _rk4(field, np.array(x, dtype=float), step, int(round(t / step)))

    return Semiflow(psi=psi, weight=w, backend="ode", field=field, step=step, name=name)


# -- named presets ----------------------------------------------------------------

def linear_flow(a: float, w: WeightFunction) -> Semiflow:
    """psi_t(x) = exp(a t) x."""
    return closed_form_flow(lambda t, x: np.exp(a * t) * x, w, name=f"linear({a})")


def affine_flow(a: float, b: float, w: WeightFunction) -> Semiflow:
    """Closed-form flow of x' = a x + b."""
    if a == 0:
        return closed_form_flow(lambda t, x: x + b * t, w, name=f"affine(0,{b})")
    return closed_form_flow(
        lambda t, x: np.exp(a * t) * x + b * np.expm1(a * t) / a, w, name=f"affine({a},{b})"
    )


def logistic_flow(r: float, k: float, w: WeightFunction) -> Semiflow:
    """Closed-form flow of x' = r x (1 - x / k); finite only while the denominator stays positive."""

    def psi(t, x):
        e = np.exp(r * t)
        den = k + x * (e - 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = k * x * e / den
        # a non-positive denominator means the solution passed through infinity
        if not np.all(np.isfinite(out)) or np.any(den <= 0):
            raise NonFiniteState("logistic flow blew up before time t")
        return out

    return closed_form_flow(psi, w, name=f"logistic({r},{k})")


def preset_field(name: str, *params: float) -> VectorField:
    """Vector fields for the CLI: zero, linear(a), affine(a,b), logistic(r,k)."""
    if name == "zero":
        return lambda x: np.zeros_like(x)
    if name == "linear":
        (a,) = params
        return lambda x: a * x
    if name == "affine":
        a, b = params
        return lambda x: a * x + b
    if name == "logistic":
        r, k = params
        return lambda x: r * x * (1.0 - x / k)
    raise ValueError(f"unknown field preset {name!r}")


# -- semigroup -----------------------------------------------------------------------

class TransportSemigroup(SemigroupOperator):
    def __init__(self, flow: Semiflow, growth: Optional[tuple] = None):
        super().__init__(flow.weight, growth=growth, name=f"transport[{flow.name}]")
        self.flow = flow

    def apply(self, t, f, x):
        return np.asarray(f(self.flow(t, x)), dtype=float)

    def propagate(self, t, f):
        return lambda y: f(self.flow(t, y))

    def weight_ratio(self, t, x):
        return self.flow.growth_ratio(t, x)


def transport_semigroup(flow: Semiflow, growth: Optional[tuple] = None) -> TransportSemigroup:
    return TransportSemigroup(flow, growth)


# -- validation ----------------------------------------------------------------------

@dataclass
class FlowGrowthProfile:
    profile: list  # (t, C_t)
    delta: float
    C: float

    @property
    def bounded(self) -> bool:
        return all(c <= self.C for t, c in self.profile if t < self.delta)


@dataclass
class SemiflowReport:
    identity_residual: float
    cocycle_residual: float
    small_time: list  # (t, max |psi_t(x) - x|)
    continuity_modulus: list  # (eta, modulus)
    growth: FlowGrowthProfile
    verdicts: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "identity_residual": self.identity_residual,
            "cocycle_residual": self.cocycle_residual,
            "small_time": [list(r) for r in self.small_time],
            "continuity_modulus": [list(r) for r in self.continuity_modulus],
            "growth_profile": [list(r) for r in self.growth.profile],
            "delta": self.growth.delta,
            "C": self.growth.C,
            "verdicts": dict(self.verdicts),
            "notes": list(self.notes),
        }


def flow_growth_profile(flow: Semiflow, grid: SampleGrid, times, delta: float = 1.0,
                        C: Optional[float] = None) -> FlowGrowthProfile:
    profile = [(float(t), float(np.max(flow.growth_ratio(t, grid.points)))) for t in times]
    if C is None:
        inside = [c for t, c in profile if t < delta]
        C = 2.0 * max(inside) if inside else 2.0
    return FlowGrowthProfile(profile, delta, C)


def validate_semiflow(
    flow: Semiflow,
    grid: SampleGrid,
    times: Sequence[float],
    delta: float = 1.0,
    tol: float = 1e-8,
    *,
    C: Optional[float] = None,
    R: Optional[float] = None,
    etas: Sequence[float] = (1e-2, 1e-3, 1e-4),
) -> SemiflowReport:
    """Check the six conditions characterizing transport-type semigroups.

    Violations are recorded in ``verdicts``; nothing is raised. Cocycle pairs
    are all (t1, t2) from ``times``. Continuity on sublevel sets {rho <= R} is
    probed by the modulus max |psi_t(x + eta e) - psi_t(x)| over grid points in
    the sublevel set, for each eta and unit direction e.
    """
    pts = grid.points
    times = sorted(float(t) for t in times)
    cocycle_tol = tol
    if flow.backend == "ode":
        scale = max(1.0, float(np.max(np.abs(pts))))
        cocycle_tol = max(tol, 10.0 * flow.step ** 4 * scale)
    rep = SemiflowReport(0.0, 0.0, [], [], None)  # type: ignore[arg-type]

    # (i) psi_0 = Id
    rep.identity_residual = float(np.max(np.abs(flow(0.0, pts) - pts)))

    # (ii) cocycle
    worst = 0.0
    for t1 in times:
        for t2 in times:
            lhs = flow(t1, flow(t2, pts))
            rhs = flow(t1 + t2, pts)
            worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    rep.cocycle_residual = worst

    # (iii) psi_t(x) -> x as t decreases to 0 (t = 0 itself is condition (i))
    per_point = []
    for t in sorted((t for t in times if t > 0), reverse=True):
        dist = np.linalg.norm(flow(t, pts) - pts, axis=1)
        per_point.append(dist)
        rep.small_time.append((t, float(dist.max())))
    small_ok = all(np.all(b <= a + tol) for a, b in zip(per_point, per_point[1:]))
    if per_point and per_point[-1].max() > tol and per_point[-1].max() >= per_point[0].max():
        small_ok = False
    if flow.backend == "closed_form":
        rep.notes.append("condition (iii) sampled only; jumps at t=0 in closed forms cannot be excluded")

    # (iv) continuity on the sublevel set
    rho = flow.weight(pts)
    if R is None:
        R = float(np.max(rho))
    inside = pts[rho <= R]
    mods = []
    t_probe = [t for t in times if 0 < t < delta] or times
    for eta in etas:
        m = 0.0
        for e in np.eye(grid.dim):
            shifted = inside + eta * e
            for t in t_probe:
                m = max(m, float(np.max(np.linalg.norm(flow(t, shifted) - flow(t, inside), axis=1))))
        mods.append((float(eta), m))
    rep.continuity_modulus = mods
    cont_ok = all(b <= a + tol for (_, a), (_, b) in zip(mods, mods[1:]))
    if mods and mods[0][1] > 0:
        shrink = mods[-1][0] / mods[0][0]
        cont_ok &= mods[-1][1] <= 10.0 * shrink * mods[0][1] + tol

    # (v), (vi)
    rep.growth = flow_growth_profile(flow, grid, times, delta, C)
    finite = all(np.isfinite(c) for _, c in rep.growth.profile)

    rep.verdicts = {
        "i": rep.identity_residual <= tol,
        "ii": rep.cocycle_residual <= cocycle_tol,
        "iii": bool(small_ok),
        "iv": bool(cont_ok),
        "v": bool(finite),
        "vi": bool(finite and rep.growth.bounded),
    }
    return rep


# -- algebraic characterizations -------------------------------------------------------

def _stack(fs, x):
    return np.stack([np.asarray(f(x), dtype=float) for f in fs], axis=1)


def check_homomorphism(S: SemigroupOperator, phi: Callable[[np.ndarray], np.ndarray],
                       fs: Sequence[ScalarFunction], grid: SampleGrid, t: float) -> float:
    """max_x |P(t)(phi(f_1, ..., f_n))(x) - phi(P(t)f_1(x), ..., P(t)f_n(x))|."""
    pts = grid.points
    composite = lambda y: phi(_stack(fs, y))  # noqa: E731
    lhs = S.apply(t, composite, pts)
    rhs = phi(np.stack([S.apply(t, f, pts) for f in fs], axis=1))
    return float(np.max(np.abs(lhs - rhs)))


def derivation_residual(S: SemigroupOperator, phi: Callable[[np.ndarray], np.ndarray],
                        fs: Sequence[ScalarFunction], grid: SampleGrid, h: float,
                        dphi: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> float:
    """Chain-rule defect of the difference generator A_h g = (P(h)g - g) / h.

    ``dphi`` returns the gradient of phi, shape (N, n); central differences
    are used when it is omitted.
    """
    pts = grid.points
    u = _stack(fs, pts)
    composite = lambda y: phi(_stack(fs, y))  # noqa: E731

    def gen(g, gx):
        return (S.apply(h, g, pts) - gx) / h

    if dphi is None:
        def dphi(v):
            eps = 1e-6
            cols = []
            for i in range(v.shape[1]):
                e = np.zeros(v.shape[1])
                e[i] = eps
                cols.append((phi(v + e) - phi(v - e)) / (2 * eps))
            return np.stack(cols, axis=1)

    lhs = gen(composite, phi(u))
    grads = dphi(u)
    rhs = sum(grads[:, i] * gen(f, u[:, i]) for i, f in enumerate(fs))
    return float(np.max(np.abs(lhs - rhs)))
