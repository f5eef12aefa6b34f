"""Weight functions, finite sample grids and weighted sup-norms.

All functions in flab act on batches of states: a state batch is an array of
shape ``(N, d)`` and a scalar function maps it to an array of shape ``(N,)``.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial import legendre, polynomial as P

from .errors import (
    EmptyGrid,
    IllConditionedFit,
    NonCoerciveProduct,
    NonFiniteFunctionValue,
    NonPositiveWeight,
)

ScalarFunction = Callable[[np.ndarray], np.ndarray]


def as_points(x, dim: Optional[int] = None) -> np.ndarray:
    """Coerce scalars, 1-d arrays or point lists to a float ``(N, d)`` array."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1) if dim in (None, 1) else arr.reshape(1, -1)
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"expected states of dimension {dim}, got {arr.shape[1]}")
    return arr


@dataclass(frozen=True)
class WeightFunction:
    """An admissible weight rho: R^d -> (0, inf).

    ``box(R)`` returns ``(lo, hi)`` arrays with ``{rho <= R}`` contained in the
    box; it is required when ``coercive`` is set. ``log_func`` is used whenever
    ``func`` would overflow; ``grad``/``hess`` are needed by the measure change.
    """

    func: ScalarFunction
    dim: int
    inf_rho: float
    coercive: bool
    box: Optional[Callable[[float], tuple]] = None
    log_func: Optional[ScalarFunction] = None
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hess: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "rho"
    # coefficients on the monomial basis when rho is a polynomial (1-d only)
    poly_coeffs: Optional[tuple] = None

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.func(as_points(x, self.dim)), dtype=float)

    def log(self, x) -> np.ndarray:
        pts = as_points(x, self.dim)
        if self.log_func is not None:
            return np.asarray(self.log_func(pts), dtype=float)
        return np.log(self(pts))

    def inverse(self, x) -> np.ndarray:
        """1/rho(x), computed through the log evaluator where rho overflows."""
        pts = as_points(x, self.dim)
        with np.errstate(over="ignore"):
            rho = self(pts)
        out = 1.0 / rho
        big = ~np.isfinite(rho)
        if big.any():
            out[big] = np.exp(-self.log(pts[big]))
        return out

    def check(self, x) -> None:
        """Raise NonPositiveWeight unless rho(x) >= inf_rho > 0 at every x."""
        logs = self.log(x)
        if np.any(np.isnan(logs)) or np.any(logs < np.log(self.inf_rho) - 1e-12):
            raise NonPositiveWeight(f"{self.name} violates its declared infimum {self.inf_rho}")


def weighted_abs(values: np.ndarray, w: WeightFunction, pts: np.ndarray) -> np.ndarray:
    """|values| / rho(pts), falling back to log space where rho overflows."""
    values = np.asarray(values, dtype=float)
    with np.errstate(over="ignore"):
        rho = w(pts)
    out = np.abs(values) / rho
    big = ~np.isfinite(rho)
    if big.any():
        with np.errstate(divide="ignore"):
            out[big] = np.exp(np.log(np.abs(values[big])) - w.log(pts[big]))
    return out


# -- constructors -----------------------------------------------------------

def polynomial_weight(coeffs: Sequence[float], name: Optional[str] = None) -> WeightFunction:
    """One-dimensional weight sum_k coeffs[k] x**k (ascending powers)."""
    c = np.trim_zeros(np.asarray(coeffs, dtype=float), "b")
    if c.size == 0:
        raise ValueError("empty coefficient list")
    deg = c.size - 1
    crit = P.polyroots(P.polyder(c)) if deg >= 2 else np.array([])
    cand = [P.polyval(r.real, c) for r in np.atleast_1d(crit) if abs(r.imag) < 1e-12]
    coercive = deg >= 2 and deg % 2 == 0 and c[-1] > 0
    if deg == 0:
        inf_rho = float(c[0])
    elif coercive:
        inf_rho = float(min(cand))
    else:
        raise ValueError("polynomial weight must be even degree with positive leading term")
    if inf_rho <= 0:
        raise NonPositiveWeight(f"polynomial weight has infimum {inf_rho} <= 0")
    d1, d2 = P.polyder(c), P.polyder(c, 2)

    def box(R):
        roots = P.polyroots(P.polysub(c, [R]))
        real = roots[np.abs(roots.imag) < 1e-9].real
        if real.size == 0:
            return np.zeros(1), np.zeros(1)
        return np.array([real.min()]), np.array([real.max()])

    return WeightFunction(
        func=lambda x: P.polyval(x[:, 0], c),
        dim=1,
        inf_rho=inf_rho,
        coercive=coercive,
        box=box if coercive else None,
        grad=lambda x: P.polyval(x, d1),
        hess=lambda x: P.polyval(x, d2)[..., None],
        name=name or f"poly{list(c)}",
        poly_coeffs=tuple(c),
    )


def one_plus_norm_sq(dim: int = 1) -> WeightFunction:
    """rho(x) = 1 + |x|^2 on R^dim."""
    if dim == 1:
        return polynomial_weight([1.0, 0.0, 1.0], name="1+x^2")
    return WeightFunction(
        func=lambda x: 1.0 + np.sum(x * x, axis=1),
        dim=dim,
        inf_rho=1.0,
        coercive=True,
        box=lambda R: (-np.full(dim, np.sqrt(max(R - 1.0, 0.0))), np.full(dim, np.sqrt(max(R - 1.0, 0.0)))),
        grad=lambda x: 2.0 * x,
        hess=lambda x: np.broadcast_to(2.0 * np.eye(dim), (x.shape[0], dim, dim)).copy(),
        name=f"1+|x|^2 (d={dim})",
    )


def exp_quadratic(dim: int = 1, a: float = 1.0) -> WeightFunction:
    """rho(x) = exp(a |x|^2), evaluated in log space when it overflows."""
    if a <= 0:
        raise ValueError("a must be positive")

    def log_func(x):
        return a * np.sum(x * x, axis=1)

    def func(x):
        with np.errstate(over="ignore"):
            return np.exp(log_func(x))

    def grad(x):
        return (2.0 * a * x) * func(x)[:, None]

    def hess(x):
        eye = np.eye(dim)
        outer = 4.0 * a * a * x[:, :, None] * x[:, None, :]
        return (2.0 * a * eye + outer) * func(x)[:, None, None]

    def box(R):
        r = np.sqrt(max(np.log(R), 0.0) / a)
        return -np.full(dim, r), np.full(dim, r)

    return WeightFunction(
        func=func, dim=dim, inf_rho=1.0, coercive=True, box=box,
        log_func=log_func, grad=grad, hess=hess, name=f"exp({a}|x|^2)",
    )


def unit_weight(dim: int = 1) -> WeightFunction:
    """rho = 1: the weighted norm is the plain sup-norm (bounded functions)."""
    return WeightFunction(
        func=lambda x: np.ones(x.shape[0]),
        dim=dim,
        inf_rho=1.0,
        coercive=False,
        log_func=lambda x: np.zeros(x.shape[0]),
        grad=lambda x: np.zeros_like(x),
        hess=lambda x: np.zeros((x.shape[0], dim, dim)),
        name="1",
    )


def product_weight(ws: Sequence[WeightFunction]) -> WeightFunction:
    """rho(x_1, ..., x_n) = rho_1(x_1) ... rho_n(x_n) on the product space.

    Coercivity of the product is only claimed when every factor is coercive
    and bounded below by 1; otherwise a NonCoerciveProduct warning is issued.
    """
    ws = list(ws)
    if not ws:
        raise ValueError("product_weight needs at least one factor")
    if len(ws) == 1:
        return ws[0]
    dims = [w.dim for w in ws]
    cuts = np.cumsum([0] + dims)
    slices = [slice(a, b) for a, b in zip(cuts[:-1], cuts[1:])]
    normalized = all(w.inf_rho >= 1.0 for w in ws)
    if not normalized:
        warnings.warn(
            "product weight has a factor with infimum < 1; coercivity not claimed",
            NonCoerciveProduct,
            stacklevel=2,
        )
    coercive = normalized and all(w.coercive and w.box is not None for w in ws)

    def func(x):
        out = np.ones(x.shape[0])
        for w, s in zip(ws, slices):
            out = out * w.func(x[:, s])
        return out

    def log_func(x):
        return sum(w.log(x[:, s]) for w, s in zip(ws, slices))

    def box(R):
        parts = [w.box(R) for w in ws]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    def _rest(vals, skip, n):
        out = np.ones(n)
        for k, v in enumerate(vals):
            if k not in skip:
                out = out * v
        return out

    grad = hess = None
    if all(w.grad is not None for w in ws):
        def grad(x):
            n = x.shape[0]
            vals = [w.func(x[:, s]) for w, s in zip(ws, slices)]
            out = np.empty_like(x)
            for k, (w, s) in enumerate(zip(ws, slices)):
                out[:, s] = w.grad(x[:, s]).reshape(n, -1) * _rest(vals, {k}, n)[:, None]
            return out

    if all(w.hess is not None and w.grad is not None for w in ws):
        def hess(x):
            n, d = x.shape
            vals = [w.func(x[:, s]) for w, s in zip(ws, slices)]
            grads = [w.grad(x[:, s]).reshape(n, -1) for w, s in zip(ws, slices)]
            out = np.zeros((n, d, d))
            for i, si in enumerate(slices):
                for j, sj in enumerate(slices):
                    rest = _rest(vals, {i, j}, n)[:, None, None]
                    if i == j:
                        out[:, si, si] = ws[i].hess(x[:, si]).reshape(n, dims[i], dims[i]) * rest
                    else:
                        out[:, si, sj] = grads[i][:, :, None] * grads[j][:, None, :] * rest
            return out

    return WeightFunction(
        func=func,
        dim=int(cuts[-1]),
        inf_rho=float(np.prod([w.inf_rho for w in ws])),
        coercive=coercive,
        box=box if coercive else None,
        log_func=log_func,
        grad=grad,
        hess=hess,
        name=" * ".join(w.name for w in ws),
    )


# -- grids ------------------------------------------------------------------

@dataclass(frozen=True)
class SampleGrid:
    """A finite stand-in for the state space: the sup over E becomes a max here."""

    points: np.ndarray
    provenance: str = "user-supplied"

    def __post_init__(self):
        pts = as_points(self.points)
        if pts.shape[0] == 0:
            raise EmptyGrid("sample grid has no points")
        if np.unique(pts, axis=0).shape[0] != pts.shape[0]:
            raise ValueError("sample grid contains duplicate points")
        if self.provenance not in ("regular-lattice", "quasi-random", "user-supplied"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def lattice(cls, lo, hi, step) -> "SampleGrid":
        lo, hi, step = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (lo, hi, step))
        if not (lo.shape == hi.shape == step.shape):
            raise ValueError("lo, hi, step must have one entry per dimension")
        axes = []
        for a, b, h in zip(lo, hi, step):
            if h <= 0 or b < a:
                raise ValueError("lattice needs step > 0 and hi >= lo")
            n = int(round((b - a) / h))
            axes.append(np.linspace(a, a + n * h, n + 1))
        mesh = np.meshgrid(*axes, indexing="ij")
        return cls(np.stack([m.ravel() for m in mesh], axis=1), "regular-lattice")

    @classmethod
    def quasi_random(cls, n: int, lo, hi, seed: int = 0) -> "SampleGrid":
        from scipy.stats import qmc

        lo, hi = np.atleast_1d(lo).astype(float), np.atleast_1d(hi).astype(float)
        sample = qmc.Halton(d=lo.size, scramble=True, seed=seed).random(n)
        return cls(qmc.scale(sample, lo, hi), "quasi-random")

    def refined(self, extra) -> "SampleGrid":
        pts = np.concatenate([self.points, as_points(extra, self.dim)])
        return SampleGrid(np.unique(pts, axis=0), "user-supplied")


@dataclass(frozen=True)
class RhoNormReport:
    value: float
    argmax: np.ndarray
    grid_size: int

    def to_dict(self):
        return {"value": self.value, "argmax": self.argmax.tolist(), "grid_size": self.grid_size}


def _evaluate(f: ScalarFunction, pts: np.ndarray) -> np.ndarray:
    vals = np.asarray(f(pts), dtype=float).reshape(-1)
    if vals.size == 1 and pts.shape[0] > 1:
        vals = np.full(pts.shape[0], vals[0])
    if not np.all(np.isfinite(vals)):
        bad = pts[~np.isfinite(vals)][0]
        raise NonFiniteFunctionValue(f"function is not finite at {bad.tolist()}")
    return vals


def weighted_norm(f: ScalarFunction, w: WeightFunction, grid: SampleGrid) -> RhoNormReport:
    """max over the grid of |f(x)| / rho(x), with the point attaining it."""
    if len(grid) == 0:
        raise EmptyGrid("sample grid has no points")
    pts = grid.points
    ratios = weighted_abs(_evaluate(f, pts), w, pts)
    k = int(np.argmax(ratios))
    return RhoNormReport(float(ratios[k]), pts[k].copy(), len(grid))


# -- weighted Stone-Weierstrass surrogate -------------------------------------

def total_degree_exponents(dim: int, degree: int) -> list:
    """Multi-indices with |alpha| <= degree in graded-lex order."""
    out = []
    for k in range(degree + 1):
        level = [a for a in itertools.product(range(k, -1, -1), repeat=dim) if sum(a) == k]
        out.extend(sorted(level, reverse=True))
    return out


@dataclass(frozen=True)
class SWApproximation:
    """clamp(p(x)) where p is a total-degree Legendre expansion on ``box``."""

    coeffs: np.ndarray
    exponents: tuple
    box: tuple
    clamp: float
    error: RhoNormReport
    inside_error: RhoNormReport
    degree: int = field(default=0)

    def polynomial(self, x) -> np.ndarray:
        x = as_points(x, len(self.box[0]))
        return _legendre_design(x, self.box, self.exponents) @ self.coeffs

    def __call__(self, x) -> np.ndarray:
        return np.clip(self.polynomial(x), -self.clamp, self.clamp)


def _legendre_design(x, box, exponents):
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    half = np.where(hi > lo, (hi - lo) / 2.0, 1.0)
    u = (x - (hi + lo) / 2.0) / half
    deg = max(sum(e) for e in exponents)
    per_dim = [legendre.legvander(u[:, j], deg) for j in range(x.shape[1])]
    cols = []
    for e in exponents:
        col = np.ones(x.shape[0])
        for j, k in enumerate(e):
            col = col * per_dim[j][:, k]
        cols.append(col)
    return np.stack(cols, axis=1)


def sw_approximate(
    f: ScalarFunction,
    w: WeightFunction,
    degree: int,
    R: float,
    grid: SampleGrid,
    eps: float = 1e-9,
) -> SWApproximation:
    """Fit a degree-``degree`` polynomial to f on {rho <= R} and clamp it.

    The fit is discrete least squares over the grid points inside the sublevel
    set; the clamp level is sup |f| there plus ``eps``. The reported error is
    the rho-norm of f - clamp(p) over the whole grid.
    """
    if degree < 0:
        raise ValueError("degree must be non-negative")
    pts = grid.points
    inside = w(pts) <= R
    if not inside.any():
        raise EmptyGrid(f"no grid points satisfy rho <= {R}")
    xin = pts[inside]
    fin = _evaluate(f, xin)
    if w.box is not None:
        box = tuple(np.asarray(b, dtype=float) for b in w.box(R))
    else:
        box = (xin.min(axis=0), xin.max(axis=0))
    exps = tuple(total_degree_exponents(grid.dim, degree))
    V = _legendre_design(xin, box, exps)
    coeffs, _, rank, sv = np.linalg.lstsq(V, fin, rcond=None)
    if rank < V.shape[1] or sv[-1] <= sv[0] * 1e3 * np.finfo(float).eps * max(V.shape):
        raise IllConditionedFit(
            f"design matrix rank {rank} < {V.shape[1]} terms; add grid points inside rho <= {R}"
        )
    clamp = float(np.max(np.abs(fin))) + eps
    approx = SWApproximation(coeffs, exps, box, clamp, None, None, degree)  # type: ignore[arg-type]
    residual = lambda x: _evaluate(f, x) - approx(x)  # noqa: E731
    err = weighted_norm(residual, w, grid)
    err_in = weighted_norm(residual, w, SampleGrid(xin, grid.provenance))
    object.__setattr__(approx, "error", err)
    object.__setattr__(approx, "inside_error", err_in)
    return approx
