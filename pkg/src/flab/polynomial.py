"""Polynomial diffusions: monomial bases, generator matrices and moment semigroups.

Convention: ``GeneratorMatrix.entries[i, j]`` is the coefficient of basis
monomial ``j`` in ``A`` applied to basis monomial ``i``. A polynomial with
coefficient row vector ``c`` is therefore mapped to ``c @ entries`` and its
moments evolve as ``c @ expm(t * entries)``. Rows of degree-k monomials only
touch columns of degree <= k, so the matrix is block lower-triangular in the
graded order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    BasisMismatch,
    NonFiniteEntries,
    NonPositiveWeightOnGrid,
    NotPolynomialCoefficients,
)
from .semigroup import SemigroupOperator
from .weighted_space import SampleGrid, WeightFunction, as_points, total_degree_exponents

PolyDict = dict  # {exponent tuple: coefficient}


# -- sparse polynomial arithmetic ------------------------------------------------

def poly_mul(p: PolyDict, q: PolyDict) -> PolyDict:
    out: PolyDict = {}
    for a, ca in p.items():
        for b, cb in q.items():
            e = tuple(i + j for i, j in zip(a, b))
            out[e] = out.get(e, 0.0) + ca * cb
    return {e: c for e, c in out.items() if c != 0.0}


def poly_add(p: PolyDict, q: PolyDict, scale: float = 1.0) -> PolyDict:
    out = dict(p)
    for e, c in q.items():
        out[e] = out.get(e, 0.0) + scale * c
    return {e: c for e, c in out.items() if c != 0.0}


def poly_diff(p: PolyDict, i: int) -> PolyDict:
    out: PolyDict = {}
    for e, c in p.items():
        if e[i] > 0:
            e2 = list(e)
            e2[i] -= 1
            out[tuple(e2)] = out.get(tuple(e2), 0.0) + c * e[i]
    return out


def poly_degree(p: PolyDict) -> int:
    return max((sum(e) for e, c in p.items() if c != 0.0), default=0)


def poly_eval(p: PolyDict, x: np.ndarray) -> np.ndarray:
    out = np.zeros(x.shape[0])
    for e, c in p.items():
        out = out + c * np.prod(x ** np.asarray(e, dtype=float), axis=1)
    return out


# -- basis and polynomials ----------------------------------------------------------

@dataclass(frozen=True)
class MonomialBasis:
    """Monomials x^alpha with |alpha| <= degree, in graded-lex order."""

    dim: int
    degree: int

    def __post_init__(self):
        if self.dim < 1 or self.degree < 0:
            raise ValueError("need dim >= 1 and degree >= 0")

    @cached_property
    def exponents(self) -> tuple:
        return tuple(total_degree_exponents(self.dim, self.degree))

    @cached_property
    def index(self) -> dict:
        return {e: i for i, e in enumerate(self.exponents)}

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.array([sum(e) for e in self.exponents])

    def __len__(self) -> int:
        return math.comb(self.dim + self.degree, self.degree)

    def design(self, x) -> np.ndarray:
        """Matrix of monomial values, shape (N, len(basis))."""
        x = as_points(x, self.dim)
        E = np.asarray(self.exponents, dtype=float)
        return np.prod(x[:, None, :] ** E[None, :, :], axis=2)


@dataclass(frozen=True)
class Polynomial:
    basis: MonomialBasis
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (len(self.basis),):
            raise BasisMismatch(f"expected {len(self.basis)} coefficients, got {c.shape}")
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def from_dict(cls, basis: MonomialBasis, terms: PolyDict) -> "Polynomial":
        c = np.zeros(len(basis))
        for e, v in terms.items():
            e = tuple(e)
            if e not in basis.index:
                raise BasisMismatch(f"monomial {e} is not in the degree-{basis.degree} basis")
            c[basis.index[e]] += v
        return cls(basis, c)

    @classmethod
    def univariate(cls, coeffs: Sequence[float], degree: Optional[int] = None) -> "Polynomial":
        """From ascending power coefficients c0 + c1 x + ... on a 1-d basis."""
        degree = len(coeffs) - 1 if degree is None else degree
        basis = MonomialBasis(1, degree)
        return cls.from_dict(basis, {(k,): c for k, c in enumerate(coeffs) if c != 0})

    def __call__(self, x) -> np.ndarray:
        return self.basis.design(x) @ self.coeffs

    def to_dict(self) -> PolyDict:
        return {e: float(c) for e, c in zip(self.basis.exponents, self.coeffs) if c != 0.0}


# -- diffusions ------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSpec:
    """Ito diffusion dX = mu(X) dt + sigma(X) dW on R^dim.

    ``drift``: (N, d) -> (N, d); ``sigma``: (N, d) -> (N, d, d). When the process
    is polynomial, ``drift_poly[i]`` holds mu_i and ``diffusion_poly[i][j]``
    holds (sigma sigma^T)_ij as exponent->coefficient dictionaries.
    """

    drift: Callable[[np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    dim: int = 1
    drift_poly: Optional[tuple] = None
    diffusion_poly: Optional[tuple] = None
    name: str = "diffusion"
    state_space: str = "R^d"

    @property
    def polynomial_flag(self) -> bool:
        return self.drift_poly is not None and self.diffusion_poly is not None

    def diffusion_matrix(self, x) -> np.ndarray:
        s = self.sigma(as_points(x, self.dim))
        return np.einsum("nik,njk->nij", s, s)


def _const(dim, c):
    return {(0,) * dim: float(c)} if c != 0 else {}


def _lin(dim, i, c):
    e = [0] * dim
    e[i] = 1
    return {tuple(e): float(c)} if c != 0 else {}


def brownian_motion(dim: int = 1, scale: float = 1.0) -> DiffusionSpec:
    eye = np.eye(dim) * scale
    return DiffusionSpec(
        drift=lambda x: np.zeros_like(x),
        sigma=lambda x: np.broadcast_to(eye, (x.shape[0], dim, dim)),
        dim=dim,
        drift_poly=tuple({} for _ in range(dim)),
        diffusion_poly=tuple(tuple(_const(dim, scale ** 2 if i == j else 0.0) for j in range(dim)) for i in range(dim)),
        name=f"bm(scale={scale})" if scale != 1 else "bm",
    )


def ornstein_uhlenbeck(kappa: float = 1.0, s: float = 1.0) -> DiffusionSpec:
    """dX = -kappa X dt + s dW in one dimension."""
    return DiffusionSpec(
        drift=lambda x: -kappa * x,
        sigma=lambda x: np.full((x.shape[0], 1, 1), s),
        dim=1,
        drift_poly=(_lin(1, 0, -kappa),),
        diffusion_poly=((_const(1, s * s),),),
        name=f"ou(kappa={kappa},s={s})",
    )


def geometric_brownian(mu: float = 0.0, s: float = 1.0) -> DiffusionSpec:
    """dX = mu X dt + s X dW, state space (0, inf)."""
    return DiffusionSpec(
        drift=lambda x: mu * x,
        sigma=lambda x: (s * x)[:, :, None],
        dim=1,
        drift_poly=(_lin(1, 0, mu),),
        diffusion_poly=(({(2,): s * s} if s != 0 else {},),),
        name=f"gbm(mu={mu},s={s})",
        state_space="(0,inf)",
    )


def zero_process(dim: int = 1) -> DiffusionSpec:
    return DiffusionSpec(
        drift=lambda x: np.zeros_like(x),
        sigma=lambda x: np.zeros((x.shape[0], dim, dim)),
        dim=dim,
        drift_poly=tuple({} for _ in range(dim)),
        diffusion_poly=tuple(tuple({} for _ in range(dim)) for _ in range(dim)),
        name="zero",
    )


# -- generator ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorMatrix:
    basis: MonomialBasis
    entries: np.ndarray
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        M = np.asarray(self.entries, dtype=float)
        n = len(self.basis)
        if M.shape != (n, n):
            raise BasisMismatch(f"generator must be {n}x{n}, got {M.shape}")
        object.__setattr__(self, "entries", M)

    @property
    def conservative(self) -> bool:
        return bool(np.all(self.entries[0] == 0.0))

    def exp(self, t: float) -> np.ndarray:
        key = float(t)
        if key not in self._cache:
            if len(self._cache) > 256:
                self._cache.clear()
            self._cache[key] = expm(self.entries, key)
        return self._cache[key]

    def propagate(self, t: float, p: Polynomial) -> Polynomial:
        if p.basis != self.basis:
            raise BasisMismatch(f"polynomial basis {p.basis} differs from generator basis {self.basis}")
        return Polynomial(self.basis, p.coeffs @ self.exp(t))


def generator_from_diffusion(spec: DiffusionSpec, m: int) -> GeneratorMatrix:
    """Matrix of A p = mu . grad p + 1/2 tr(a hess p) on monomials of degree <= m."""
    if not spec.polynomial_flag:
        raise NotPolynomialCoefficients(f"{spec.name} carries no polynomial coefficient data")
    d = spec.dim
    for i, mu in enumerate(spec.drift_poly):
        if poly_degree(mu) > 1:
            raise NotPolynomialCoefficients(f"drift component {i} has degree > 1")
    for row in spec.diffusion_poly:
        for a in row:
            if poly_degree(a) > 2:
                raise NotPolynomialCoefficients("diffusion matrix entry has degree > 2")
    basis = MonomialBasis(d, m)
    M = np.zeros((len(basis), len(basis)))
    for r, e in enumerate(basis.exponents):
        mono = {e: 1.0}
        img: PolyDict = {}
        for i in range(d):
            di = poly_diff(mono, i)
            img = poly_add(img, poly_mul(spec.drift_poly[i], di))
            for j in range(d):
                img = poly_add(img, poly_mul(spec.diffusion_poly[i][j], poly_diff(di, j)), 0.5)
        for e2, c in img.items():
            M[r, basis.index[e2]] += c
    return GeneratorMatrix(basis, M)


# -- matrix exponential -----------------------------------------------------------------

_THETA = {3: 1.495585217958292e-2, 5: 2.539398330063230e-1, 7: 9.504178996162932e-1,
          9: 2.097847961257068e0, 13: 5.371920351148152e0}
_PADE = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0),
    13: (64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
         1187353796428800.0, 129060195264000.0, 10559470521600.0,
         670442572800.0, 33522128640.0, 1323241920.0, 40840800.0, 960960.0,
         16380.0, 182.0, 1.0),
}


def _pade_uv(A, m):
    b = _PADE[m]
    n = A.shape[0]
    eye = np.eye(n)
    A2 = A @ A
    if m == 13:
        A4 = A2 @ A2
        A6 = A4 @ A2
        U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
                 + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * eye)
        V = A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2) + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * eye
        return U, V
    powers = [eye, A2]
    while len(powers) < (m + 1) // 2:
        powers.append(powers[-1] @ A2)
    U = A @ sum(b[2 * k + 1] * powers[k] for k in range(len(powers)))
    V = sum(b[2 * k] * powers[k] for k in range(len(powers)))
    return U, V


def expm(M, t: float = 1.0) -> np.ndarray:
    """exp(t M) by scaling and squaring with a diagonal Pade approximant.

    Degree selection and thresholds follow Higham (2005): the lowest Pade
    degree whose 1-norm threshold covers ``t M`` is used, otherwise degree 13
    after scaling by 2^-s.
    """
    A = np.asarray(M, dtype=float) * float(t)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("expm needs a square matrix")
    if not np.all(np.isfinite(A)):
        raise NonFiniteEntries("matrix has non-finite entries")
    n = A.shape[0]
    if t == 0 or not A.any():
        return np.eye(n)
    norm1 = np.linalg.norm(A, 1)
    for m in (3, 5, 7, 9):
        if norm1 <= _THETA[m]:
            U, V = _pade_uv(A, m)
            return np.linalg.solve(V - U, V + U)
    s = max(0, int(math.ceil(math.log2(norm1 / _THETA[13]))))
    U, V = _pade_uv(A / 2.0 ** s, 13)
    X = np.linalg.solve(V - U, V + U)
    for _ in range(s):
        X = X @ X
    return X


def operator_2norm(M, tol: float = 1e-10, max_iter: int = 10_000) -> float:
    """Largest singular value by power iteration on M^T M."""
    M = np.asarray(M, dtype=float)
    if not M.any():
        return 0.0
    G = M.T @ M
    v = np.linspace(1.0, 2.0, M.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = G @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector in the kernel; restart on a different direction
            v = np.roll(v, 1) + 1e-3
            v /= np.linalg.norm(v)
            continue
        v_new = w / nw
        lam_new = float(v_new @ G @ v_new)
        resid = np.linalg.norm(G @ v_new - lam_new * v_new)
        if abs(lam_new - lam) <= tol * max(1.0, lam_new) and resid <= tol * max(1.0, lam_new):
            lam = lam_new
            break
        v, lam = v_new, lam_new
    return math.sqrt(max(lam, 0.0))


# -- moment semigroup ------------------------------------------------------------------

def moment_semigroup(A: GeneratorMatrix, t: float, p: Polynomial, x) -> np.ndarray:
    """(e^{tA} p)(x) = E_x[p(X_t)] for a polynomial process with generator A."""
    return A.propagate(t, p)(x)


class MomentSemigroup(SemigroupOperator):
    """Backend acting on polynomials in the generator's basis.

    ``rho`` must itself lie in the basis; P(t)rho is then e^{tA}rho exactly.
    """

    def __init__(self, A: GeneratorMatrix, weight: WeightFunction, rho: Optional[Polynomial] = None,
                 growth: Optional[tuple] = None, name: str = ""):
        super().__init__(weight, growth=growth, name=name or "moment")
        self.A = A
        if rho is None and weight.poly_coeffs is not None and A.basis.dim == 1:
            if len(weight.poly_coeffs) - 1 > A.basis.degree:
                raise BasisMismatch("weight polynomial exceeds the generator degree")
            rho = Polynomial.from_dict(A.basis, {(k,): c for k, c in enumerate(weight.poly_coeffs) if c})
        self.rho = rho

    def _poly(self, f) -> Polynomial:
        if not isinstance(f, Polynomial):
            raise BasisMismatch("moment backend only acts on Polynomial test functions")
        return f

    def apply(self, t, f, x):
        return self.A.propagate(t, self._poly(f))(x)

    def times_weight(self, f, w):
        if isinstance(f, Polynomial) and w is self.weight and self.rho is not None:
            # stay inside the polynomial algebra
            return Polynomial.from_dict(f.basis, poly_mul(f.to_dict(), self.rho.to_dict()))
        return super().times_weight(f, w)

    def propagate(self, t, f):
        return self.A.propagate(t, self._poly(f))

    def weight_ratio(self, t, x):
        if self.rho is None:
            return super().weight_ratio(t, x)
        pts = as_points(x, self.dim)
        return self.A.propagate(t, self.rho)(pts) / self.rho(pts)


@dataclass
class GrowthBoundReport:
    opnorm: float
    C: float
    rows: list  # (t, max ratio, bound)
    passes: bool
    max_slack: float

    def to_dict(self):
        return {"opnorm": self.opnorm, "C": self.C, "passes": self.passes,
                "max_slack": self.max_slack,
                "rows": [{"t": t, "max_ratio": r, "bound": b} for t, r, b in self.rows]}


def check_growth_bound(A: GeneratorMatrix, rho: Polynomial, grid: SampleGrid, times, C: float = 1.0) -> GrowthBoundReport:
    """Verify (e^{tA}rho)(x) <= C exp(t ||A||_2) rho(x) on the grid."""
    pts = grid.points
    r0 = rho(pts)
    if np.any(r0 <= 0):
        raise NonPositiveWeightOnGrid(f"rho <= 0 at {pts[np.argmax(r0 <= 0)].tolist()}")
    nrm = operator_2norm(A.entries)
    rows = []
    for t in times:
        ratio = float(np.max(A.propagate(t, rho)(pts) / r0))
        rows.append((float(t), ratio, C * math.exp(t * nrm)))
    slack = min((b - r for _, r, b in rows), default=0.0)
    return GrowthBoundReport(nrm, C, rows, bool(slack >= -1e-12), float(slack))


def affine_moment_condition_check(m_tail: float, mu_tails: Sequence[float], r: float,
                                  killing_linear_part: float) -> bool:
    """Gate for affine processes: finite r-th tail moments and no linear killing."""
    if r < 2:
        raise ValueError("the moment condition needs r >= 2")
    tails = [m_tail, *mu_tails]
    if any(v < 0 for v in tails):
        raise ValueError("tail moments are non-negative")
    return bool(all(math.isfinite(v) for v in tails) and killing_linear_part == 0)
