"""A Markov chain on the naturals that satisfies P1-P3 and P5 but not P4.

State 0 is absorbing. From odd n the chain jumps to n + 1 at rate
n^alpha e^{-n} and to 0 at rate n^alpha (1 - e^{-n}); from even n it jumps to
0 at rate (n - 1)^alpha. With rho(n) = exp(n^2) the upward jumps are weighted
by rho(n + 1) / rho(n) = e^{2n + 1}, which makes

    s(t) = sup_n rho(n+1) n^alpha t e^{-n^alpha t} e^{-n} / rho(n)

blow up as t -> 0. Every weight is handled through its logarithm.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import AlphaOutOfRange, StateOutOfRange, TruncationSuspect
from .polynomial import expm
from .semigroup import SemigroupOperator
from .weighted_space import ScalarFunction, WeightFunction, as_points, exp_quadratic

LOG_OVERFLOW = 700.0


@dataclass(frozen=True)
class RateChain:
    alpha: float
    n_max: int

    @staticmethod
    def log_rho(n):
        n = np.asarray(n, dtype=float)
        return n * n

    def exit_rate(self, n) -> np.ndarray:
        """Total jump rate out of n: n^alpha for odd n, (n - 1)^alpha for even n >= 2."""
        n = np.asarray(n, dtype=np.int64)
        base = np.where(n % 2 == 1, n, n - 1).astype(float)
        return np.where(n == 0, 0.0, base ** self.alpha)

    def rates(self, n: int) -> dict:
        """Non-zero entries a_{n, j} of row n, keyed by j."""
        if n < 0 or n > self.n_max:
            raise StateOutOfRange(f"state {n} outside [0, {self.n_max}]")
        if n == 0:
            return {}
        lam = float(self.exit_rate(n))
        if n % 2 == 1:
            up = lam * math.exp(-n)
            return {n: -lam, n + 1: up, 0: lam * -math.expm1(-n)}
        return {n: -lam, 0: lam}


def build_chain(alpha: float, n_max: int = 100_000) -> RateChain:
    if not alpha > 1:
        raise AlphaOutOfRange(f"alpha must exceed 1, got {alpha}")
    if n_max < 3:
        raise ValueError("n_max must be at least 3")
    chain = RateChain(float(alpha), int(n_max))
    for n in range(1, min(n_max, 64)):
        row = chain.rates(n)
        if abs(sum(row.values())) > 1e-12 * max(1.0, abs(row[n])):
            raise ArithmeticError(f"row {n} is not conservative")
    return chain


# -- closed-form transitions -----------------------------------------------------------

def transition_probs(chain: RateChain, n, t: float):
    """(p_nn, p_{n,n+1}, p_{n,0}) for an array of states n at time t.

    p_{n,n+1} is zero for even n; p_{n,0} is the complement, computed with
    expm1 so that it stays accurate for small t.
    """
    n = np.asarray(n, dtype=np.int64)
    if t < 0:
        raise ValueError("t must be non-negative")
    lam = chain.exit_rate(n)
    stay = np.exp(-lam * t)
    odd = n % 2 == 1
    up = np.where(odd, np.exp(-n.astype(float)) * lam * t * stay, 0.0)
    gone = np.maximum(-np.expm1(-lam * t) - up, 0.0)
    return stay, up, gone


@dataclass
class TransitionRow:
    n: int
    t: float
    probs: dict

    def total(self) -> float:
        return math.fsum(self.probs.values())


def transition_row(chain: RateChain, n: int, t: float) -> TransitionRow:
    if n < 1 or n > chain.n_max:
        raise StateOutOfRange(f"state {n} outside [1, {chain.n_max}]")
    stay, up, gone = (float(v) for v in transition_probs(chain, n, t))
    probs = {n: stay, 0: gone}
    if n % 2 == 1:
        probs[n + 1] = up
    return TransitionRow(n, t, probs)


def _forward_rhs(chain: RateChain, n: int, p: np.ndarray) -> np.ndarray:
    """(p A) on the reachable set, p ordered as (p_nn, p_{n,n+1}, p_{n,0})."""
    a = chain.rates(n)
    lam_up = float(chain.exit_rate(n + 1))
    d_stay = p[0] * a[n]
    if n % 2 == 1:
        d_up = p[0] * a[n + 1] - p[1] * lam_up
        d_gone = p[0] * a[0] + p[1] * lam_up
    else:
        d_up = 0.0
        d_gone = p[0] * a[0]
    return np.array([d_stay, d_up, d_gone])


def forward_equation_residual(chain: RateChain, n: int, t: float, h: Optional[float] = None) -> float:
    """Max-norm gap between a finite-difference d/dt p(t) and p(t) A on {n, n+1, 0}.

    Central differences with h = 1e-6 max(1, t) by default; when t < h the
    second-order forward stencil is used instead.
    """
    if h is None:
        h = 1e-6 * max(1.0, t)
    p = lambda s: np.array(transition_probs(chain, n, s), dtype=float)  # noqa: E731
    if t < h:
        deriv = (-3.0 * p(t) + 4.0 * p(t + h) - p(t + 2.0 * h)) / (2.0 * h)
    else:
        deriv = (p(t + h) - p(t - h)) / (2.0 * h)
    return float(np.max(np.abs(deriv - _forward_rhs(chain, n, p(t)))))


def chapman_kolmogorov_residual(chain: RateChain, n: int, t: float, s: float) -> float:
    """max_j |p_{n,j}(t + s) - sum_k p_{n,k}(t) p_{k,j}(s)| over j in {n, n+1, 0}."""
    st, ut, gt = transition_probs(chain, n, t)
    ss, us, gs = transition_probs(chain, n, s)
    s1, _, g1 = transition_probs(chain, n + 1, s)
    composed = np.array([
        st * ss,
        st * us + ut * s1,
        st * gs + ut * g1 + gt,
    ])
    direct = np.array(transition_probs(chain, n, t + s))
    return float(np.max(np.abs(direct - composed)))


def rate_matrix(chain: RateChain, size: Optional[int] = None) -> np.ndarray:
    """Dense rate matrix on states 0..size-1 (default n_max + 1).

    Jumps leaving the truncated range are dropped, so only the last row can
    fail to be conservative.
    """
    m = chain.n_max + 1 if size is None else int(size)
    A = np.zeros((m, m))
    for n in range(1, m):
        for j, a in chain.rates(n).items():
            if j < m:
                A[n, j] = a
    return A


def matrix_transition_row(chain: RateChain, n: int, t: float, size: Optional[int] = None) -> np.ndarray:
    """Row n of expm(t A) for the truncated chain; a cross-check of the closed forms."""
    m = size if size is not None else min(chain.n_max + 1, n + 3)
    return expm(rate_matrix(chain, m), t)[n]


# -- s(t) ------------------------------------------------------------------------------

@dataclass
class SValue:
    t: float
    log_value: float
    argmax: int
    truncated: bool

    @property
    def value(self) -> float:
        """s(t) itself, or inf when it is not representable as a double."""
        return math.exp(self.log_value) if self.log_value <= LOG_OVERFLOW else math.inf

    @property
    def representable(self) -> bool:
        return self.log_value <= LOG_OVERFLOW


def s_log_terms(alpha: float, t: float, n) -> np.ndarray:
    """log of rho(n+1) n^alpha t e^{-n^alpha t} e^{-n} / rho(n) = n + 1 + alpha log n + log t - n^alpha t."""
    n = np.asarray(n, dtype=float)
    with np.errstate(divide="ignore"):
        return n + 1.0 + alpha * np.log(n) + math.log(t) - n ** alpha * t


def s_of_t(alpha: float, t: float, n_max: int = 100_000) -> SValue:
    """Scan odd n <= n_max for the supremum s(t).

    Warns TruncationSuspect when the maximizer is the largest admissible odd
    n: the true supremum then lies beyond n_max and the result is a lower bound.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    if not alpha > 1:
        raise AlphaOutOfRange(f"alpha must exceed 1, got {alpha}")
    odd = np.arange(1, n_max + 1, 2)
    logs = s_log_terms(alpha, t, odd)
    k = int(np.argmax(logs))
    truncated = k == odd.size - 1
    if truncated:
        warnings.warn(f"s({t:g}) is maximized at the scan bound n = {odd[k]}; raise n_max",
                      TruncationSuspect, stacklevel=2)
    return SValue(float(t), float(logs[k]), int(odd[k]), bool(truncated))


@dataclass
class BlowupTable:
    rows: list
    increasing: Optional[bool]

    def to_rows(self) -> list:
        return [
            {"t": r.t, "log_s": r.log_value, "s_or_inf_flag": r.value if r.representable else "inf",
             "argmax_n": r.argmax, "truncated": r.truncated}
            for r in self.rows
        ]


def p4_blowup_table(alpha: float, t_list: Sequence[float], n_max: int = 100_000) -> BlowupTable:
    """s(t) along a decreasing ladder; ``increasing`` is None for a single time."""
    ts = [float(t) for t in t_list]
    if any(b >= a for a, b in zip(ts, ts[1:])):
        raise ValueError("t_list must be strictly decreasing")
    rows = [s_of_t(alpha, t, n_max) for t in ts]
    verdict = None
    if len(rows) > 1:
        verdict = all(b.log_value > a.log_value for a, b in zip(rows, rows[1:]))
    return BlowupTable(rows, verdict)


def strong_continuity_failure_witness(alpha: float, n0: int, t_list: Sequence[float],
                                      n_max: int = 100_000) -> list:
    """Lower bounds on ||P(t) f - f||_rho for f = rho 1{n0 + 1}.

    Each row holds the log of the bound at the fixed odd ``n0`` (which tends
    to -inf as t -> 0) and at the t-dependent maximizer of s(t) (which grows).
    """
    if n0 % 2 != 1:
        raise ValueError("n0 must be odd")
    out = []
    for t in t_list:
        if t == 0:
            out.append({"t": 0.0, "log_bound_fixed": -math.inf, "log_bound_opt": -math.inf, "n_opt": n0})
            continue
        fixed = float(s_log_terms(alpha, t, n0))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TruncationSuspect)
            s = s_of_t(alpha, t, n_max)
        out.append({"t": float(t), "log_bound_fixed": fixed, "log_bound_opt": s.log_value,
                    "n_opt": s.argmax})
    return out


# -- semigroup backend -------------------------------------------------------------------

def chain_weight() -> WeightFunction:
    """rho(n) = exp(n^2), extended to the real line."""
    return exp_quadratic(1, 1.0)


class ChainSemigroup(SemigroupOperator):
    """P(t)f(n) = p_nn f(n) + p_{n,n+1} f(n+1) + p_{n,0} f(0) on integer states."""

    def __init__(self, chain: RateChain, w: Optional[WeightFunction] = None):
        super().__init__(w or chain_weight(), name=f"chain[alpha={chain.alpha}]")
        self.chain = chain

    def _states(self, x) -> np.ndarray:
        pts = as_points(x, 1)
        n = np.rint(pts[:, 0]).astype(np.int64)
        if np.any(np.abs(pts[:, 0] - n) > 1e-9) or np.any(n < 0) or np.any(n > self.chain.n_max):
            raise StateOutOfRange("chain states must be integers in [0, n_max]")
        return n

    def apply(self, t, f: ScalarFunction, x):
        n = self._states(x)
        stay, up, gone = transition_probs(self.chain, n, t)
        fn = np.asarray(f(n[:, None].astype(float)), dtype=float)
        fu = np.asarray(f((n + 1)[:, None].astype(float)), dtype=float)
        f0 = float(np.asarray(f(np.zeros((1, 1))), dtype=float)[0])
        out = stay * fn + gone * f0
        # f(n+1) may be huge; only odd rows carry it
        odd = up > 0
        out[odd] += up[odd] * fu[odd]
        out[n == 0] = f0
        return out

    def log_weight_ratio(self, t, x) -> np.ndarray:
        """log(P(t) rho / rho) without ever forming rho."""
        n = self._states(x)
        stay, up, gone = transition_probs(self.chain, n, t)
        nf = n.astype(float)
        with np.errstate(divide="ignore"):
            terms = np.stack([np.log(stay), np.log(up) + 2 * nf + 1, np.log(gone) - nf * nf])
        out = np.logaddexp.reduce(terms, axis=0)
        out[n == 0] = 0.0
        return out

    def weight_ratio(self, t, x):
        with np.errstate(over="ignore"):
            return np.exp(self.log_weight_ratio(t, x))


def chain_semigroup(alpha: float = 2.0, n_max: int = 100_000) -> ChainSemigroup:
    return ChainSemigroup(build_chain(alpha, n_max))
