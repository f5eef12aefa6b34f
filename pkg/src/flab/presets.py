"""Named backends with matching test functions, grids and time ladders."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import counterexample, diffusion, polynomial, semigroup, transport
from .weighted_space import SampleGrid, WeightFunction, one_plus_norm_sq

# 2^-k for k = 7..30: starts where |x| (1 - e^{-t}) is small on [-5, 5], so
# pointwise residuals are monotone, and ends below 1e-8 for residuals of order t
FINE_LADDER = [2.0 ** -k for k in range(7, 31)]
CHAIN_LADDER = [10.0 ** -k for k in range(1, 7)]


@dataclass
class AxiomPreset:
    name: str
    backend: semigroup.SemigroupOperator
    fs: list
    grid: SampleGrid
    times: list
    p3_times: list
    tol: float = 1e-8
    expect_fail: tuple = ()
    positive_fs: Optional[list] = None

    def run(self, **kw) -> semigroup.AxiomReport:
        opts = dict(p3_times=self.p3_times, tol=self.tol, positive_fs=self.positive_fs)
        opts.update(kw)
        return semigroup.check_axioms(self.backend, self.fs, self.grid, self.times, **opts)


def _real_fs():
    return [
        lambda x: np.sin(x[:, 0]),
        lambda x: x[:, 0],
        lambda x: 1.0 + x[:, 0] ** 2,
        lambda x: np.exp(-x[:, 0] ** 2),
    ]


def _poly_fs(degree: int = 2):
    return [
        polynomial.Polynomial.univariate([1.0], degree),
        polynomial.Polynomial.univariate([0.0, 1.0], degree),
        polynomial.Polynomial.univariate([0.0, 0.0, 1.0], degree),
        polynomial.Polynomial.univariate([1.0, 0.0, 1.0], degree),
    ]


def default_grid(lo: float = -5.0, hi: float = 5.0, step: float = 0.1) -> SampleGrid:
    return SampleGrid.lattice([lo], [hi], [step])


def bm_moment_backend(w: Optional[WeightFunction] = None) -> polynomial.MomentSemigroup:
    w = w or one_plus_norm_sq(1)
    A = polynomial.generator_from_diffusion(polynomial.brownian_motion(1), 2)
    # (1 + x^2 + t) / (1 + x^2) <= 1 + t <= 2 e^{-1/2} e^{t/2}
    return polynomial.MomentSemigroup(A, w, growth=(2.0 * math.exp(-0.5), 0.5), name="bm-moment")


def ou_moment_backend(w: Optional[WeightFunction] = None, kappa: float = 1.0, s: float = 1.0):
    w = w or one_plus_norm_sq(1)
    A = polynomial.generator_from_diffusion(polynomial.ornstein_uhlenbeck(kappa, s), 2)
    return polynomial.MomentSemigroup(A, w, growth=(1.0 + s * s / (2.0 * kappa), 0.0), name="ou-moment")


def contraction_backend(w: Optional[WeightFunction] = None) -> transport.TransportSemigroup:
    """f(e^{-t} x); rho(e^{-t} x) <= rho(x) so the semigroup is a contraction."""
    w = w or one_plus_norm_sq(1)
    return transport.transport_semigroup(transport.linear_flow(-1.0, w), growth=(1.0, 0.0))


def shift_backend(w: Optional[WeightFunction] = None) -> transport.TransportSemigroup:
    """f(x + t); sup_x rho(x + t) / rho(x) = (sqrt(1 + t^2/4) + t/2)^2 <= e^t."""
    w = w or one_plus_norm_sq(1)
    return transport.transport_semigroup(transport.affine_flow(0.0, 1.0, w), growth=(1.0, 1.0))


def axiom_preset(name: str, *, n_paths: int = 20_000, dt: float = 1e-2, seed: int = 0,
                 threads: Optional[int] = None) -> AxiomPreset:
    w = one_plus_norm_sq(1)
    times = [0.1, 0.5, 1.0]
    if name == "identity":
        return AxiomPreset(name, semigroup.identity_semigroup(w), _real_fs(), default_grid(), times, FINE_LADDER)
    if name == "transport-contraction":
        return AxiomPreset(name, contraction_backend(w), _real_fs(), default_grid(), times, FINE_LADDER)
    if name == "transport-shift":
        return AxiomPreset(name, shift_backend(w), _real_fs(), default_grid(), times, FINE_LADDER)
    if name == "ou-moment":
        return AxiomPreset(name, ou_moment_backend(w), _poly_fs(), default_grid(), times, FINE_LADDER)
    if name == "bm-moment":
        return AxiomPreset(name, bm_moment_backend(w), _poly_fs(), default_grid(), times, FINE_LADDER)
    if name == "bm-gauss":
        return AxiomPreset(name, diffusion.brownian_gaussian(w), _poly_fs(), default_grid(), times, FINE_LADDER)
    if name == "ou-gauss":
        return AxiomPreset(name, diffusion.ou_gaussian(w), _poly_fs(), default_grid(), times, FINE_LADDER)
    if name == "chain":
        grid = SampleGrid(np.arange(1.0, 10.0)[:, None], "regular-lattice")
        fs = [lambda x: 1.0 / (1.0 + x[:, 0]), lambda x: np.cos(x[:, 0]), lambda x: np.ones(x.shape[0])]
        return AxiomPreset(name, counterexample.chain_semigroup(2.0), fs, grid, times, CHAIN_LADDER,
                           tol=1e-6, expect_fail=("P4",))
    if name == "bm-mc":
        spec = polynomial.brownian_motion(1)
        S = diffusion.mc_semigroup(spec, 2.0, dt, n_paths, seed, w, threads)
        grid = SampleGrid.lattice([-2.0], [2.0], [1.0])
        # P3 residuals of non-martingales are O(t) with O(t^2) standard errors
        # under common random numbers, so P1-P3 use the martingale f(x) = x
        fs = [lambda x: x[:, 0], lambda x: np.ones(x.shape[0])]
        pos = [lambda x: 1.0 + x[:, 0] ** 2, lambda x: np.exp(-x[:, 0] ** 2)]
        return AxiomPreset(name, S, fs, grid, [0.5, 1.0], [0.5, 0.25, 0.1], positive_fs=pos)
    raise KeyError(f"unknown preset {name!r}")


AXIOM_PRESETS = ("identity", "transport-contraction", "transport-shift", "ou-moment", "bm-moment",
                 "bm-gauss", "ou-gauss", "chain", "bm-mc")

DIFFUSIONS: dict = {
    "bm": lambda: polynomial.brownian_motion(1),
    "ou": lambda: polynomial.ornstein_uhlenbeck(1.0, 1.0),
    "gbm": lambda: polynomial.geometric_brownian(0.05, 0.2),
    "zero": lambda: polynomial.zero_process(1),
}


def diffusion_preset(name: str) -> polynomial.DiffusionSpec:
    try:
        return DIFFUSIONS[name]()
    except KeyError:
        raise KeyError(f"unknown diffusion preset {name!r}") from None


# quasi-contraction constants omega for rho = 1 + x^2 (max of c' over the line)
OMEGA = {"bm": 1.0, "ou": 1.0, "zero": 0.0}
