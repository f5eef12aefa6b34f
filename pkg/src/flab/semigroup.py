"""Semigroup backends, axiom checks, resolvents and the map onto l^rho.

A backend evaluates ``P(t)f`` at a batch of states. Analytic backends are exact
up to rounding; Monte Carlo backends also report a standard error, and every
check against them is widened to three standard errors.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import BackendCannotEvaluateWeight, BetaBelowGrowthBound, StochasticBackendTolerance
from .weighted_space import (
    SampleGrid,
    ScalarFunction,
    WeightFunction,
    as_points,
    unit_weight,
    weighted_abs,
)

DEFAULT_TOL = 1e-8


def default_p3_ladder(kmax: int = 12) -> list:
    return [2.0 ** -k for k in range(kmax + 1)]


class SemigroupOperator:
    """Base class: subclasses implement ``apply`` (and usually ``weight_ratio``).

    ``growth`` is an optional ``(M, omega)`` pair with ||P(t)|| <= M exp(omega t).
    """

    stochastic = False

    def __init__(self, weight: WeightFunction, growth: Optional[tuple] = None, name: str = ""):
        self.weight = weight
        self.growth = growth
        self.name = name or type(self).__name__

    @property
    def dim(self) -> int:
        return self.weight.dim

    def apply(self, t: float, f: ScalarFunction, x) -> np.ndarray:
        raise NotImplementedError

    def apply_with_error(self, t: float, f: ScalarFunction, x):
        vals = self.apply(t, f, x)
        return vals, np.zeros_like(vals)

    def propagate(self, t: float, f: ScalarFunction) -> ScalarFunction:
        """The function P(t)f, for composing applications."""
        return lambda y: self.apply(t, f, y)

    def times_weight(self, f: ScalarFunction, w: WeightFunction) -> ScalarFunction:
        """f * w as a test function this backend can act on."""
        return lambda y: np.asarray(f(y), dtype=float) * w(y)

    def weight_ratio(self, t: float, x) -> np.ndarray:
        """P(t)rho(x) / rho(x) via the backend's declared surrogate."""
        raise BackendCannotEvaluateWeight(f"{self.name} declares no P(t)rho surrogate")

    def weight_ratio_with_error(self, t: float, x):
        vals = self.weight_ratio(t, x)
        return vals, np.zeros_like(vals)

    def __repr__(self):
        return f"<{self.name} on {self.weight.name}>"


class IdentitySemigroup(SemigroupOperator):
    def __init__(self, weight: WeightFunction):
        super().__init__(weight, growth=(1.0, 0.0), name="identity")

    def apply(self, t, f, x):
        return np.asarray(f(as_points(x, self.dim)), dtype=float)

    def propagate(self, t, f):
        return f

    def weight_ratio(self, t, x):
        return np.ones(as_points(x, self.dim).shape[0])


def identity_semigroup(weight: WeightFunction) -> IdentitySemigroup:
    return IdentitySemigroup(weight)


# -- operator norm and strong continuity --------------------------------------

def estimate_operator_norm(S: SemigroupOperator, t: float, grid: SampleGrid) -> float:
    """max over the grid of P(t)rho(x)/rho(x): a lower bound for ||P(t)||.

    For a positive operator, P(t)rho(x) is the sup of |P(t)f(x)| over
    |f| <= rho, so on transport backends the estimate is exact up to the grid.
    """
    return float(np.max(S.weight_ratio(t, grid.points)))


def strong_continuity_profile(S: SemigroupOperator, f: ScalarFunction, grid: SampleGrid, times):
    """List of (t, max_x |P(t)f(x) - f(x)| / rho(x)); no verdict is drawn."""
    pts = grid.points
    base = np.asarray(f(pts), dtype=float)
    out = []
    for t in times:
        dev = weighted_abs(S.apply(t, f, pts) - base, S.weight, pts)
        out.append((float(t), float(np.max(dev))))
    return out


# -- axioms --------------------------------------------------------------------

@dataclass
class AxiomReport:
    p1_residual: float
    p2_residual: float
    p3_residual: float
    p5_violation: float
    p4_norm_profile: list
    verdicts: dict
    tol: float
    p4_eps: float
    p4_bound: float
    p3_trend: list = field(default_factory=list)
    widened: bool = False

    @property
    def all_pass(self) -> bool:
        return all(self.verdicts.values())

    def to_dict(self) -> dict:
        return {
            "p1_residual": self.p1_residual,
            "p2_residual": self.p2_residual,
            "p3_residual": self.p3_residual,
            "p5_violation": self.p5_violation,
            "p4_norm_profile": [[t, _json_float(v)] for t, v in self.p4_norm_profile],
            "p3_trend": [[t, v] for t, v in self.p3_trend],
            "verdicts": dict(self.verdicts),
            "tol": self.tol,
            "p4_eps": self.p4_eps,
            "p4_bound": self.p4_bound,
            "widened": self.widened,
        }


def _json_float(v: float):
    return v if math.isfinite(v) else ("inf" if v > 0 else "nan")


def check_axioms(
    S: SemigroupOperator,
    fs: Sequence[ScalarFunction],
    grid: SampleGrid,
    times: Sequence[float],
    tol: float = DEFAULT_TOL,
    *,
    p3_times: Optional[Sequence[float]] = None,
    positive_fs: Optional[Sequence[ScalarFunction]] = None,
    eps: float = 0.1,
    bound: float = 10.0,
) -> AxiomReport:
    """Numerically test P1-P5 on a grid.

    Residuals of P1-P3 are measured in the weighted sense |.|/rho(x), like the
    norm itself. P2 is tested on every ordered pair of ``times``; P3 along the
    decreasing ladder ``p3_times`` (default 2^-k, k = 0..12); P4 on every tested
    time in [0, eps] against ``bound``; P5 on the non-negative test functions.
    On stochastic backends each comparison is widened to 3 standard errors.
    """
    fs = list(fs)
    if not fs:
        raise ValueError("check_axioms needs at least one test function")
    pts = grid.points
    w = S.weight
    widened = False

    def judge(diff, se):
        nonlocal widened
        resid = weighted_abs(diff, w, pts)
        allowed = np.full_like(resid, tol)
        if S.stochastic:
            band = 3.0 * weighted_abs(se, w, pts)
            if np.any(band > tol):
                widened = True
            allowed = np.maximum(allowed, band)
        return resid, allowed

    ok = {}
    base = [np.asarray(f(pts), dtype=float) for f in fs]

    # P1
    r1 = 0.0
    ok["P1"] = True
    for f, fx in zip(fs, base):
        vals, se = S.apply_with_error(0.0, f, pts)
        resid, allowed = judge(vals - fx, se)
        r1 = max(r1, float(resid.max()))
        ok["P1"] &= bool(np.all(resid <= allowed))

    # P2
    r2 = 0.0
    ok["P2"] = True
    for f in fs:
        for s in times:
            inner = S.propagate(s, f)
            for t in times:
                direct, se1 = S.apply_with_error(t + s, f, pts)
                composed, se2 = S.apply_with_error(t, inner, pts)
                resid, allowed = judge(direct - composed, np.hypot(se1, se2))
                r2 = max(r2, float(resid.max()))
                ok["P2"] &= bool(np.all(resid <= allowed))

    # P3: per (f, x) the residual must not grow as t decreases and must end below tol
    ladder = sorted(p3_times if p3_times is not None else default_p3_ladder(), reverse=True)
    trend = []
    prev = None
    ok["P3"] = True
    last_allowed = None
    for t in ladder:
        step_resid = []
        step_allowed = []
        for f, fx in zip(fs, base):
            vals, se = S.apply_with_error(t, f, pts)
            resid, allowed = judge(vals - fx, se)
            step_resid.append(resid)
            step_allowed.append(allowed)
        cur = np.stack(step_resid)
        cur_allowed = np.stack(step_allowed)
        if prev is not None and np.any(cur > prev + cur_allowed):
            ok["P3"] = False
        prev = cur
        last_allowed = cur_allowed
        trend.append((float(t), float(cur.max())))
    r3 = trend[-1][1] if trend else 0.0
    if prev is not None and np.any(prev > last_allowed):
        ok["P3"] = False

    # P4
    small = sorted({0.0, *[t for t in list(times) + ladder if t <= eps]})
    profile = []
    lows = []
    for t in small:
        ratio, se = S.weight_ratio_with_error(t, pts)
        profile.append((t, float(np.max(ratio))))
        # stochastic backends are judged on the lower confidence bound
        lows.append(float(np.max(ratio - 3.0 * se)) if S.stochastic else profile[-1][1])
    ok["P4"] = bool(max(lows) <= bound)

    # P5
    if positive_fs is None:
        positive_fs = [f for f, fx in zip(fs, base) if np.all(fx >= 0)]
    r5 = 0.0
    ok["P5"] = True
    for f in positive_fs:
        for t in times:
            vals, se = S.apply_with_error(t, f, pts)
            viol = np.maximum(0.0, -vals)
            allowed = np.maximum(tol, 3.0 * se) if S.stochastic else np.full_like(viol, tol)
            r5 = max(r5, float(viol.max()))
            ok["P5"] &= bool(np.all(viol <= allowed))

    if widened:
        warnings.warn(
            f"{S.name}: Monte Carlo error exceeds tol={tol}; comparisons widened to 3 SE",
            StochasticBackendTolerance,
            stacklevel=2,
        )
    return AxiomReport(
        p1_residual=r1,
        p2_residual=r2,
        p3_residual=r3,
        p5_violation=r5,
        p4_norm_profile=profile,
        verdicts=ok,
        tol=tol,
        p4_eps=eps,
        p4_bound=bound,
        p3_trend=trend,
        widened=widened,
    )


# -- resolvent -----------------------------------------------------------------

@dataclass(frozen=True)
class ResolventQuadrature:
    """Quadrature for R(beta)f = int_0^inf exp(-beta s) P(s)f ds.

    ``gauss-laguerre`` integrates the whole half-line (no truncation);
    ``trapezoid`` truncates at ``t_max`` and reports the analytic tail bound.
    """

    beta: float
    t_max: float = 40.0
    n_nodes: int = 64
    rule: str = "gauss-laguerre"

    def __post_init__(self):
        if self.rule not in ("trapezoid", "gauss-laguerre"):
            raise ValueError(f"unknown quadrature rule {self.rule!r}")
        if self.n_nodes < 2 or self.t_max <= 0:
            raise ValueError("need n_nodes >= 2 and t_max > 0")

    def nodes(self, n: Optional[int] = None):
        n = n or self.n_nodes
        if self.rule == "gauss-laguerre":
            u, wts = np.polynomial.laguerre.laggauss(n)
            return u / self.beta, wts / self.beta
        s = np.linspace(0.0, self.t_max, n)
        wts = np.full(n, s[1] - s[0])
        wts[0] = wts[-1] = 0.5 * (s[1] - s[0])
        return s, wts * np.exp(-self.beta * s)


@dataclass
class ResolventResult:
    value: np.ndarray
    tail_bound: float
    quad_error: float


def _growth(S: SemigroupOperator):
    return S.growth if S.growth is not None else (None, None)


def resolvent_apply(S: SemigroupOperator, q: ResolventQuadrature, f: ScalarFunction, x) -> ResolventResult:
    M, omega = _growth(S)
    if omega is not None and q.beta <= omega:
        raise BetaBelowGrowthBound(f"beta = {q.beta} must exceed the growth bound {omega}")
    if q.beta <= 0:
        raise BetaBelowGrowthBound("beta must be positive")
    pts = as_points(x, S.dim)

    def integrate(n):
        s, wts = q.nodes(n)
        total = np.zeros(pts.shape[0])
        for si, wi in zip(s, wts):
            total += wi * S.apply(float(si), f, pts)
        return total

    value = integrate(q.n_nodes)
    coarse = integrate(max(2, q.n_nodes // 2))
    quad_error = float(np.max(np.abs(value - coarse)))
    if q.rule == "gauss-laguerre":
        tail = 0.0
    elif omega is None:
        tail = float("nan")
    else:
        tail = M * math.exp((omega - q.beta) * q.t_max) / (q.beta - omega)
    return ResolventResult(value, tail, quad_error)


def yosida_check(S: SemigroupOperator, f: ScalarFunction, grid: SampleGrid, betas, **quad):
    """List of (beta, ||beta R(beta)f - f||_rho) over increasing betas."""
    pts = grid.points
    fx = np.asarray(f(pts), dtype=float)
    out = []
    for beta in betas:
        res = resolvent_apply(S, ResolventQuadrature(beta, **quad), f, pts)
        err = weighted_abs(beta * res.value - fx, S.weight, pts)
        out.append((float(beta), float(err.max())))
    return out


# -- isometry onto l^rho ------------------------------------------------------------

class EllRhoSemigroup(SemigroupOperator):
    """Q(t)g = P(t)(g rho) / rho acting on bounded functions."""

    def __init__(self, base: SemigroupOperator, weight: Optional[WeightFunction] = None):
        self.base = base
        self.rho = weight or base.weight
        super().__init__(unit_weight(self.rho.dim), growth=base.growth, name=f"ell_rho({base.name})")
        self.stochastic = base.stochastic

    def apply_with_error(self, t, g, x):
        pts = as_points(x, self.dim)
        vals, se = self.base.apply_with_error(t, self.base.times_weight(g, self.rho), pts)
        inv = self.rho.inverse(pts)
        return vals * inv, se * inv

    def apply(self, t, g, x):
        return self.apply_with_error(t, g, x)[0]

    def weight_ratio_with_error(self, t, x):
        # Q(t) is positive, so its sup-norm is attained at g = 1
        if self.base.weight is self.rho:
            return self.base.weight_ratio_with_error(t, x)
        return self.apply_with_error(t, lambda y: np.ones(y.shape[0]), x)

    def weight_ratio(self, t, x):
        return self.weight_ratio_with_error(t, x)[0]


def to_ell_rho(S: SemigroupOperator, w: Optional[WeightFunction] = None) -> EllRhoSemigroup:
    return EllRhoSemigroup(S, w)
