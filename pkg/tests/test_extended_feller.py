import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flab import diffusion as df
from flab import extended_feller as ef
from flab import polynomial as pl
from flab import presets
from flab import semigroup as sg
from flab.errors import EmptyGrid, QuasiContractionViolated
from flab.weighted_space import SampleGrid, one_plus_norm_sq


@pytest.fixture
def rho():
    return one_plus_norm_sq(1)


X = np.linspace(-4, 4, 81)[:, None]


# -- Q semigroup ----------------------------------------------------------------------------

def test_q_of_identity_is_identity(rho):
    Q = ef.q_semigroup(sg.identity_semigroup(rho), rho, 0.0)
    g = lambda x: np.cos(x[:, 0])  # noqa: E731
    np.testing.assert_allclose(Q.apply(1.3, g, X), g(X), rtol=1e-15)


def test_q_of_bm_moment(rho):
    Q = ef.q_semigroup(presets.bm_moment_backend(rho), rho, 1.0)
    assert Q.survival(1.0, np.array([[0.0]]))[0] == pytest.approx(2 * math.exp(-1), abs=1e-10)
    assert np.all(Q.weight_ratio(0.7, X) <= 1.0 + 1e-12)
    one = pl.Polynomial.univariate([1.0], 2)
    assert Q.apply(1.0, one, np.array([[0.0]]))[0] == pytest.approx(0.735759, abs=1e-6)


def test_q_of_bm_mc(rho):
    S = df.mc_semigroup(pl.brownian_motion(1), 1.0, 1e-2, 50_000, 2, rho)
    vals, se = ef.q_semigroup(S, rho, 1.0).apply_with_error(1.0, lambda x: np.ones(x.shape[0]), np.array([[0.0]]))
    assert abs(vals[0] - 2 * math.exp(-1)) <= 3 * se[0] + 2e-2 * math.exp(-1)


def test_q_is_contraction_on_grid(rho):
    Q = ef.q_semigroup(presets.ou_moment_backend(rho), rho, presets.OMEGA["ou"])
    g = presets.default_grid()
    for t in (0.1, 0.5, 2.0):
        assert sg.estimate_operator_norm(Q, t, g) <= 1.0 + 1e-12


def test_ell_rho_norm(rho):
    g = SampleGrid.lattice([-10.0], [10.0], [1e-3])
    assert ef.ell_rho_norm(lambda x: rho(x) / rho(x), rho, g) == 1.0
    assert ef.ell_rho_norm(lambda x: np.zeros(x.shape[0]), rho, g) == 0.0
    assert ef.ell_rho_norm(lambda x: x[:, 0] / rho(x), rho, g) == pytest.approx(0.5, abs=1e-6)


def test_ell_rho_norm_empty_grid(rho):
    class Empty:
        points = np.zeros((0, 1))

        def __len__(self):
            return 0

    with pytest.raises(EmptyGrid):
        ef.ell_rho_norm(np.sin, rho, Empty())


# -- killed diffusion parameters -----------------------------------------------------------

def test_bm_params(rho):
    p = ef.killed_diffusion_params(pl.brownian_motion(1), rho, 1.0)
    np.testing.assert_allclose(p.mu_prime(X)[:, 0], 2 * X[:, 0] / (1 + X[:, 0] ** 2), rtol=1e-14)
    intensity = -p.killing_rate(X)
    np.testing.assert_allclose(intensity, 1 - 1 / (1 + X[:, 0] ** 2), atol=1e-14)
    assert np.all((intensity >= 0) & (intensity < 1))
    assert p.worst_value == pytest.approx(0.0, abs=1e-14)


def test_zero_process_params(rho):
    p = ef.killed_diffusion_params(pl.zero_process(1), rho, 0.7)
    np.testing.assert_array_equal(p.mu_prime(X), 0.0)
    np.testing.assert_allclose(p.killing_rate(X), -0.7)


def test_ou_params(rho):
    p = ef.killed_diffusion_params(pl.ornstein_uhlenbeck(1.0, 1.0), rho, 1.0)
    x = X[:, 0]
    np.testing.assert_allclose(p.mu_prime(X)[:, 0], -x + 2 * x / (1 + x * x), rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(p.killing_rate(X), (1 - 2 * x * x) / (1 + x * x) - 1, atol=1e-14)
    assert np.all(p.killing_rate(X) <= 0)


def test_ou_without_discount_violates(rho):
    with pytest.raises(QuasiContractionViolated) as exc:
        ef.killed_diffusion_params(pl.ornstein_uhlenbeck(1.0, 1.0), rho, 0.0)
    assert "1" in str(exc.value)
    p = ef.killed_diffusion_params(pl.ornstein_uhlenbeck(1.0, 1.0), rho, 0.0, strict=False)
    assert p.worst_value == pytest.approx(1.0)
    assert p.worst_x[0] == pytest.approx(0.0, abs=1e-9)


def test_two_dimensional_params():
    w = one_plus_norm_sq(2)
    p = ef.killed_diffusion_params(pl.brownian_motion(2), w, 2.0)
    pts = np.array([[0.0, 0.0], [1.0, -1.0]])
    # c' = tr(hess rho) / (2 rho) = 2 / rho
    np.testing.assert_allclose(p.c_prime(pts), 2.0 / w(pts))


def test_params_need_derivatives(rho):
    from dataclasses import replace

    with pytest.raises(ValueError):
        ef.killed_diffusion_params(pl.brownian_motion(1), replace(rho, hess=None), 1.0)


# -- killed simulation --------------------------------------------------------------------------

def constant_rate(rate):
    spec = pl.brownian_motion(1)
    return ef.KilledDiffusionParams(spec, one_plus_norm_sq(1), 0.0, spec.drift,
                                    lambda x: np.full(np.atleast_2d(x).shape[0], rate))


def test_no_killing_matches_plain_run():
    params = constant_rate(0.0)
    ens = ef.simulate_killed(params, [0.2], 1.0, 0.1, 500, seed=4)
    assert np.all(ens.alive(1.0))
    plain = df.run_paths(params.spec, [[0.2]], 10, 0.1, 500, 4, range(11), purpose=df.KILLED_NOISE)
    np.testing.assert_array_equal(ens.base.states, np.transpose(plain.states[:, 0], (1, 0, 2)))


def test_constant_rate_survival():
    ens = ef.simulate_killed(constant_rate(-1.0), [0.0], 1.0, 1e-3, 100_000, seed=9, record_times=[0.5, 1.0])
    est = ens.survival(1.0)
    p = math.exp(-1.0)
    assert abs(est.mean - p) <= 3 * math.sqrt(p * (1 - p) / 1e5)
    assert ens.survival(0.5).mean > est.mean
    # killed paths evaluate to 0
    vals = ens.evaluate(lambda x: np.ones(x.shape[0]), 1.0)
    assert vals.sum() == ens.alive(1.0).sum()
    assert np.all(np.isnan(ens.base.values_at(1.0)[~ens.alive(1.0)]))


def test_killed_survival_matches_q(rho):
    params = ef.killed_diffusion_params(pl.brownian_motion(1), rho, 1.0)
    ens = ef.simulate_killed(params, [1.0], 1.0, 1e-2, 50_000, seed=1, record_times=[1.0])
    Q = ef.q_semigroup(presets.bm_moment_backend(rho), rho, 1.0)
    est = ens.survival(1.0)
    assert abs(est.mean - Q.survival(1.0, np.array([[1.0]]))[0]) <= 3 * est.standard_error + 1e-2


def test_killed_reproducible_across_threads(rho):
    params = ef.killed_diffusion_params(pl.brownian_motion(1), rho, 1.0)
    n = 2 * df.BLOCK + 5
    a = ef.simulate_killed(params, [0.0], 0.2, 0.05, n, seed=3, threads=1)
    b = ef.simulate_killed(params, [0.0], 0.2, 0.05, n, seed=3, threads=2)
    np.testing.assert_array_equal(a.killed_at, b.killed_at)
    assert a.base.states.tobytes() == b.base.states.tobytes()


# -- indicators -------------------------------------------------------------------------------

def path_values():
    # three paths, times (0.5, 1.0), one component
    return np.array([[[1.0], [-1.0]], [[-1.0], [2.0]], [[0.5], [0.5]]])


@pytest.mark.parametrize("expr, expected", [
    ("x(0.5) > 0", [True, False, True]),
    ("x(0.5) > 0 & x(1) > 0", [False, False, True]),
    ("x(0.5) > 0 | x(1) > 0", [True, True, True]),
    ("x(1) < 0 | x(0.5) < 0 & x(1) > 3", [True, False, False]),
    ("(x(1) < 0 | x(0.5) < 0) & x(1) < 3", [True, True, False]),
    ("x[0](0.5) >= 0.5", [True, False, True]),
    ("x(0.5) <= -1e0", [False, True, False]),
])
def test_parse_indicator(expr, expected):
    ind = ef.parse_indicator(expr)
    vals = path_values()
    order = [(0.5, 1.0).index(t) for t in ind.times]
    np.testing.assert_array_equal(ind(vals[:, order, :]), expected)
    assert ind.label == expr


@pytest.mark.parametrize("expr", ["", "x(0.5)", "x(0.5) > ", "y(1) > 0", "x(1) > 0 &", "(x(1) > 0", "x(1) = 0",
                                  "x(1) > 0)"])
def test_parse_indicator_errors(expr):
    with pytest.raises(ValueError):
        ef.parse_indicator(expr)


@given(st.floats(0.01, 5), st.floats(-3, 3))
@settings(max_examples=40)
def test_parse_indicator_round_trip(t, c):
    ind = ef.parse_indicator(f"x({t!r}) > {c!r}")
    assert ind.times == (t,)
    vals = np.array([[[c + 1.0]], [[c]], [[c - 1.0]]])
    np.testing.assert_array_equal(ind(vals), [True, False, False])


def test_everything_and_nothing():
    v = np.zeros((4, 1, 1))
    assert ef.everything(1.0)(v).all() and not ef.nothing(1.0)(v).any()


# -- Radon-Nikodym equivalence ----------------------------------------------------------------

def test_rn_whole_space_is_survival(rho):
    lhs, rhs, ok = ef.rn_equivalence_check(pl.brownian_motion(1), rho, ef.everything(1.0), 1.0, 1e-2,
                                           40_000, 7, omega=1.0)
    assert ok
    assert abs(rhs.mean - 2 * math.exp(-1)) <= 3 * rhs.standard_error + 1e-2


def test_rn_empty_set(rho):
    lhs, rhs, ok = ef.rn_equivalence_check(pl.brownian_motion(1), rho, ef.nothing(1.0), 1.0, 1e-2,
                                           1000, 7, omega=1.0)
    assert ok and lhs.mean == rhs.mean == 0.0


def test_rn_symmetric_set(rho):
    res = ef.rn_equivalence_checks(pl.brownian_motion(1), rho,
                                   [ef.parse_indicator("x(0.5) > 0"), ef.everything(1.0)],
                                   1.0, 1e-2, 40_000, 8, 1.0)
    half, whole = res
    assert half.verdict and whole.verdict
    assert half.lhs.mean == pytest.approx(0.5 * whole.lhs.mean, abs=4 * whole.lhs.standard_error + 0.01)
    assert set(half.to_dict()) == {"indicator", "lhs", "rhs", "combined_se", "verdict"}


def test_rn_rejects_late_indicator(rho):
    with pytest.raises(ValueError):
        ef.rn_equivalence_checks(pl.brownian_motion(1), rho, [ef.parse_indicator("x(2) > 0")], 1.0, 0.1,
                                 10, 0, 1.0)
