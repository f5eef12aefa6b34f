"""The rho-transformed semigroup and its realization as a killed diffusion.

Q(t)f = exp(-omega t) P(t)(f rho) / rho acts on bounded functions. For an Ito
diffusion it is the law of a diffusion with drift
    mu'_i = mu_i + sum_j d_j rho a_ij / rho,          a = sigma sigma^T
killed at rate -(c' - omega), where
    c' = (grad rho . mu + 1/2 tr(a hess rho)) / rho.
Killed paths sit in the cemetery state and every function is 0 there.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .diffusion import KILL, KILLED_NOISE, NOISE, McEstimate, PathEnsemble, _record_steps, n_steps, run_paths
from .errors import EmptyGrid, QuasiContractionViolated
from .polynomial import DiffusionSpec
from .semigroup import SemigroupOperator
from .weighted_space import SampleGrid, ScalarFunction, WeightFunction, as_points, unit_weight


# -- Q semigroup ---------------------------------------------------------------------

class QSemigroup(SemigroupOperator):
    def __init__(self, base: SemigroupOperator, w: WeightFunction, omega: float):
        super().__init__(unit_weight(w.dim), growth=(1.0, 0.0), name=f"Q[{base.name}, omega={omega}]")
        self.base, self.rho, self.omega = base, w, omega
        self.stochastic = base.stochastic

    def apply_with_error(self, t, f, x):
        pts = as_points(x, self.dim)
        vals, se = self.base.apply_with_error(t, self.base.times_weight(f, self.rho), pts)
        scale = math.exp(-self.omega * t) * self.rho.inverse(pts)
        return vals * scale, se * scale

    def apply(self, t, f, x):
        return self.apply_with_error(t, f, x)[0]

    def weight_ratio_with_error(self, t, x):
        """Q(t)1 = exp(-omega t) P(t)rho / rho through the base backend's surrogate."""
        if self.base.weight is not self.rho:
            return self.apply_with_error(t, lambda y: np.ones(y.shape[0]), x)
        ratio, se = self.base.weight_ratio_with_error(t, x)
        scale = math.exp(-self.omega * t)
        return ratio * scale, se * scale

    def weight_ratio(self, t, x):
        return self.weight_ratio_with_error(t, x)[0]

    def survival(self, t, x) -> np.ndarray:
        """Q(t)1: the probability that the killed process is alive at t."""
        return self.weight_ratio(t, x)


def q_semigroup(S: SemigroupOperator, w: WeightFunction, omega: float) -> QSemigroup:
    """Q(t)f = exp(-omega t) S(t)(f rho)/rho; a contraction when ||S(t)|| <= exp(omega t)."""
    return QSemigroup(S, w, omega)


def ell_rho_norm(f: ScalarFunction, w: WeightFunction, grid: SampleGrid) -> float:
    """Sup-norm on the grid of a function already in l^rho form (f = g / rho)."""
    if len(grid) == 0:
        raise EmptyGrid("sample grid has no points")
    vals = np.asarray(f(grid.points), dtype=float)
    return float(np.max(np.abs(vals)))


# -- killed diffusion parameters --------------------------------------------------------

@dataclass
class KilledDiffusionParams:
    spec: DiffusionSpec
    weight: WeightFunction
    omega: float
    mu_prime: Callable[[np.ndarray], np.ndarray]
    c_prime: Callable[[np.ndarray], np.ndarray]
    worst_x: Optional[np.ndarray] = None
    worst_value: float = -math.inf

    @property
    def sigma(self):
        return self.spec.sigma

    def killing_rate(self, x) -> np.ndarray:
        """c'(x) - omega; the killing intensity is its negative."""
        return self.c_prime(x) - self.omega


def _raw_c_prime(spec: DiffusionSpec, w: WeightFunction):
    def c(x):
        x = as_points(x, spec.dim)
        rho, g, H = w(x), w.grad(x).reshape(x.shape), w.hess(x).reshape(x.shape[0], spec.dim, spec.dim)
        a = spec.diffusion_matrix(x)
        first = np.sum(g * spec.drift(x), axis=1)
        second = 0.5 * np.einsum("nij,nij->n", H, a)
        return (first + second) / rho
    return c


def killed_diffusion_params(spec: DiffusionSpec, w: WeightFunction, omega: float,
                            grid: Optional[SampleGrid] = None, tol: float = 1e-10,
                            strict: bool = True) -> KilledDiffusionParams:
    """Drift mu' and killing rate c' - omega of the rho-transformed diffusion.

    ``(sigma^2)_ij`` is read as ``(sigma sigma^T)_ij``. The rate is checked on
    ``grid`` (default: lattice on [-5, 5]^d, step 0.01 in 1-d); a positive
    value raises QuasiContractionViolated when ``strict``.
    """
    if w.grad is None or w.hess is None:
        raise ValueError("the weight needs gradient and Hessian evaluators")
    d = spec.dim

    def mu_prime(x):
        x = as_points(x, d)
        a = spec.diffusion_matrix(x)
        g = w.grad(x).reshape(x.shape)
        return spec.drift(x) + np.einsum("nij,nj->ni", a, g) / w(x)[:, None]

    c_prime = _raw_c_prime(spec, w)
    params = KilledDiffusionParams(spec, w, omega, mu_prime, c_prime)
    if grid is None:
        step = 0.01 if d == 1 else 0.25
        grid = SampleGrid.lattice([-5.0] * d, [5.0] * d, [step] * d)
    rate = params.killing_rate(grid.points)
    k = int(np.argmax(rate))
    params.worst_x, params.worst_value = grid.points[k].copy(), float(rate[k])
    if strict and params.worst_value > tol:
        raise QuasiContractionViolated(params.worst_x, params.worst_value)
    return params


# -- killed paths ---------------------------------------------------------------------------

@dataclass
class KilledPathEnsemble:
    base: PathEnsemble
    killed_at: np.ndarray  # step index of entry into the cemetery, -1 if never

    def alive(self, t: float) -> np.ndarray:
        k = n_steps(t, self.base.dt)
        return (self.killed_at < 0) | (self.killed_at > k)

    def survival(self, t: float) -> McEstimate:
        ok = ~self.base.flagged
        return McEstimate.from_samples(self.alive(t)[ok].astype(float))

    def evaluate(self, f: ScalarFunction, t: float) -> np.ndarray:
        """f along each path at time t, with f = 0 in the cemetery state."""
        xs = self.base.values_at(t)
        live = self.alive(t) & ~self.base.flagged
        out = np.zeros(xs.shape[0])
        if live.any():
            out[live] = np.asarray(f(xs[live]), dtype=float)
        return out


def simulate_killed(params: KilledDiffusionParams, x0, T: float, dt: float, n_paths: int,
                    seed: int, record_times: Optional[Sequence[float]] = None,
                    threads: Optional[int] = None) -> KilledPathEnsemble:
    """Euler-Maruyama with drift mu', thinned with probability 1 - exp((c' - omega) dt) per step.

    Driving noise and killing uniforms use separate keyed streams.
    """
    spec = params.spec
    x0 = as_points(x0, spec.dim)[0]
    total, record = _record_steps(T, dt, record_times)
    run = run_paths(spec, x0[None, :], total, dt, n_paths, seed, record, purpose=KILLED_NOISE,
                    drift=params.mu_prime, kill_rate=params.killing_rate, kill_purpose=KILL,
                    threads=threads)
    states = np.transpose(run.states[:, 0], (1, 0, 2))
    base = PathEnsemble(spec, x0, dt, T, n_paths, seed, np.array(record) * dt, states, run.flagged[0])
    return KilledPathEnsemble(base, run.killed_at[0])


# -- cylinder indicators ---------------------------------------------------------------------

@dataclass(frozen=True)
class CylinderIndicator:
    """1_A for a set A determined by path values at finitely many times.

    ``predicate`` receives an array (n_paths, len(times), d) and returns a
    boolean array (n_paths,).
    """

    times: tuple
    predicate: Callable[[np.ndarray], np.ndarray]
    label: str = "A"

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(self.predicate(values), dtype=bool)


def everything(T: float) -> CylinderIndicator:
    return CylinderIndicator((T,), lambda v: np.ones(v.shape[0], dtype=bool), "Omega")


def nothing(T: float) -> CylinderIndicator:
    return CylinderIndicator((T,), lambda v: np.zeros(v.shape[0], dtype=bool), "empty")


_TOKEN = re.compile(r"\s*(?:(?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)|(?P<op><=|>=|<|>|&|\||\(|\))|"
                    r"(?P<var>x(?:\[(?P<idx>\d+)\])?))")


def parse_indicator(expr: str) -> CylinderIndicator:
    """Parse e.g. ``x(0.5) > 0 & (x(1) < 1 | x[0](0.25) >= -1)``.

    ``x(t)`` is the path value at time t (``x[i](t)`` for component i);
    comparisons are against constants, ``&`` binds tighter than ``|``.
    """
    tokens = []
    pos = 0
    expr = expr.strip()
    while pos < len(expr):
        m = _TOKEN.match(expr, pos)
        if not m or m.end() == pos:
            raise ValueError(f"cannot parse indicator near {expr[pos:]!r}")
        if m.group("num") is not None:
            tokens.append(("num", float(m.group("num"))))
        elif m.group("op") is not None:
            tokens.append(("op", m.group("op")))
        else:
            tokens.append(("var", int(m.group("idx") or 0)))
        pos = m.end()
        while pos < len(expr) and expr[pos].isspace():
            pos += 1

    times: list = []
    i = 0

    def peek():
        return tokens[i] if i < len(tokens) else (None, None)

    def take(kind=None, value=None):
        nonlocal i
        tok = peek()
        if tok[0] is None or (kind and tok[0] != kind) or (value and tok[1] != value):
            raise ValueError(f"unexpected token {tok[1]!r} in indicator {expr!r}")
        i += 1
        return tok

    def comparison():
        comp = take("var")[1]
        take("op", "(")
        t = take("num")[1]
        take("op", ")")
        op = take("op")[1]
        if op not in ("<", ">", "<=", ">="):
            raise ValueError(f"expected a comparison, got {op!r}")
        c = take("num")[1]
        if t not in times:
            times.append(t)
        j = times.index(t)
        fn = {"<": np.less, ">": np.greater, "<=": np.less_equal, ">=": np.greater_equal}[op]
        return lambda v: fn(v[:, j, comp], c)

    def atom():
        if peek() == ("op", "("):
            take("op", "(")
            node = disjunction()
            take("op", ")")
            return node
        return comparison()

    def conjunction():
        node = atom()
        while peek() == ("op", "&"):
            take()
            left, right = node, atom()
            node = (lambda a, b: lambda v: a(v) & b(v))(left, right)
        return node

    def disjunction():
        node = conjunction()
        while peek() == ("op", "|"):
            take()
            left, right = node, conjunction()
            node = (lambda a, b: lambda v: a(v) | b(v))(left, right)
        return node

    pred = disjunction()
    if i != len(tokens):
        raise ValueError(f"trailing tokens in indicator {expr!r}")
    # predicate indexes times in order of first appearance
    return CylinderIndicator(tuple(times), pred, expr)


# -- Radon-Nikodym equivalence -------------------------------------------------------------

@dataclass
class RNResult:
    label: str
    lhs: McEstimate
    rhs: McEstimate
    verdict: bool

    @property
    def combined_se(self) -> float:
        return math.hypot(self.lhs.standard_error, self.rhs.standard_error)

    def to_dict(self):
        return {"indicator": self.label, "lhs": self.lhs.to_dict(), "rhs": self.rhs.to_dict(),
                "combined_se": self.combined_se, "verdict": self.verdict}


def rn_equivalence_checks(spec: DiffusionSpec, w: WeightFunction, indicators: Sequence[CylinderIndicator],
                          T: float, dt: float, n_paths: int, seed: int, omega: float, x0=0.0,
                          params: Optional[KilledDiffusionParams] = None,
                          threads: Optional[int] = None) -> list:
    """E'[1_A; alive at T] against exp(-omega T) E[1_A rho(X_T) / rho(X_0)] for each A.

    Both sides share one killed and one plain ensemble; their noise streams are
    independent, so the standard errors combine in quadrature.
    """
    if params is None:
        params = killed_diffusion_params(spec, w, omega)
    x0 = as_points(x0, spec.dim)[0]
    times = sorted({T, *[t for ind in indicators for t in ind.times]})
    if max(times) > T + 1e-12:
        raise ValueError("indicator times must not exceed T")
    killed = simulate_killed(params, x0, T, dt, n_paths, seed, times, threads=threads)
    total, record = _record_steps(T, dt, times)
    plain = run_paths(spec, x0[None, :], total, dt, n_paths, seed, record, purpose=NOISE, threads=threads)
    plain_states = np.transpose(plain.states[:, 0], (1, 0, 2))
    rec_times = np.array(record) * dt
    rho0 = float(w(x0[None, :])[0])
    kT = int(np.argmin(np.abs(rec_times - T)))
    weight_T = np.zeros(n_paths)
    okp = ~plain.flagged[0]
    weight_T[okp] = w(plain_states[okp, kT]) * math.exp(-omega * T) / rho0
    alive_T = killed.alive(T) & ~killed.base.flagged

    results = []
    for ind in indicators:
        cols = [int(np.argmin(np.abs(rec_times - t))) for t in ind.times]
        with np.errstate(invalid="ignore"):
            in_a_killed = ind(killed.base.states[:, cols, :]) & alive_T
            in_a_plain = ind(plain_states[:, cols, :]) & okp
        lhs = McEstimate.from_samples(in_a_killed.astype(float)[~killed.base.flagged])
        rhs = McEstimate.from_samples(np.where(in_a_plain, weight_T, 0.0)[okp])
        verdict = abs(lhs.mean - rhs.mean) <= 3.0 * math.hypot(lhs.standard_error, rhs.standard_error)
        results.append(RNResult(ind.label, lhs, rhs, bool(verdict)))
    return results


def rn_equivalence_check(spec: DiffusionSpec, w: WeightFunction, indicator: CylinderIndicator,
                         T: float, dt: float, n_paths: int, seed: int, omega: float = 0.0,
                         x0=0.0, **kw):
    r = rn_equivalence_checks(spec, w, [indicator], T, dt, n_paths, seed, omega, x0, **kw)[0]
    return r.lhs, r.rhs, r.verdict
