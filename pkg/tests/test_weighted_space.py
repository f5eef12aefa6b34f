import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flab.errors import EmptyGrid, IllConditionedFit, NonCoerciveProduct, NonFiniteFunctionValue, NonPositiveWeight
from flab.weighted_space import (
    SampleGrid,
    WeightFunction,
    exp_quadratic,
    one_plus_norm_sq,
    polynomial_weight,
    product_weight,
    sw_approximate,
    total_degree_exponents,
    unit_weight,
    weighted_abs,
    weighted_norm,
)

# sin on {1 + x^2 <= 10}, lattice step 0.01: Chebyshev-basis least squares oracle
SW_SIN_BASELINE = {
    3: 0.043822247713136885,
    5: 0.0028873868075177888,
    7: 0.00010244893331031375,
    9: 2.2789460190056633e-06,
}

finite = st.floats(min_value=-50, max_value=50, allow_nan=False)


@pytest.fixture
def rho():
    return one_plus_norm_sq(1)


@pytest.fixture
def grid():
    return SampleGrid.lattice([-5.0], [5.0], [0.01])


# -- weights ------------------------------------------------------------------------------

def test_polynomial_weight_infimum_and_box(rho):
    assert rho.inf_rho == pytest.approx(1.0)
    assert rho.coercive
    lo, hi = rho.box(10.0)
    assert lo[0] == pytest.approx(-3.0) and hi[0] == pytest.approx(3.0)


def test_polynomial_weight_with_shifted_minimum():
    w = polynomial_weight([2.0, -2.0, 1.0])  # (x - 1)^2 + 1
    assert w.inf_rho == pytest.approx(1.0)
    assert w(np.array([1.0]))[0] == pytest.approx(1.0)


@pytest.mark.parametrize("coeffs", [[1.0, 1.0], [1.0, 0.0, -1.0], [0.0]])
def test_polynomial_weight_rejects_non_coercive(coeffs):
    with pytest.raises(ValueError):
        polynomial_weight(coeffs)


def test_polynomial_weight_rejects_non_positive():
    with pytest.raises(NonPositiveWeight):
        polynomial_weight([-1.0, 0.0, 1.0])


def test_coercive_box_contains_sublevel_set():
    rng = np.random.default_rng(0)
    for w in (one_plus_norm_sq(1), one_plus_norm_sq(2), exp_quadratic(2, 0.5)):
        lo, hi = w.box(7.0)
        pts = rng.uniform(-20, 20, size=(20_000, w.dim))
        outside = np.any((pts < lo) | (pts > hi), axis=1)
        assert np.all(w(pts[outside]) > 7.0)


def test_exp_quadratic_log_space():
    w = exp_quadratic(1)
    x = np.array([[30.0]])
    assert np.isinf(w(x)[0])
    assert w.log(x)[0] == 900.0
    assert w.inverse(x)[0] == pytest.approx(math.exp(-900.0), rel=1e-12, abs=0)
    assert weighted_abs(np.array([math.exp(600.0)]), w, x)[0] == pytest.approx(math.exp(-300.0))


def test_check_flags_values_below_infimum():
    bad = WeightFunction(func=lambda x: 0.5 * np.ones(x.shape[0]), dim=1, inf_rho=1.0, coercive=False)
    with pytest.raises(NonPositiveWeight):
        bad.check(np.zeros((3, 1)))
    unit_weight(1).check(np.zeros((3, 1)))


@pytest.mark.parametrize(
    "ws, point, expected",
    [
        ([one_plus_norm_sq(1), one_plus_norm_sq(1)], [1.0, 1.0], 4.0),
        ([one_plus_norm_sq(1)] * 3, [0.0, 0.0, 0.0], 1.0),
        ([one_plus_norm_sq(1), one_plus_norm_sq(2)], [2.0, 1.0, 1.0], 15.0),
    ],
)
def test_product_weight_values(ws, point, expected):
    w = product_weight(ws)
    assert w.dim == len(point)
    assert w(np.array([point]))[0] == pytest.approx(expected, rel=1e-14)
    assert w.coercive


def test_product_of_one_is_identity(rho):
    assert product_weight([rho]) is rho


def test_product_weight_warns_below_one():
    small = polynomial_weight([0.5, 0.0, 1.0])
    with pytest.warns(NonCoerciveProduct):
        w = product_weight([small, one_plus_norm_sq(1)])
    assert not w.coercive
    assert w.inf_rho == pytest.approx(0.5)


def test_product_weight_empty():
    with pytest.raises(ValueError):
        product_weight([])


@given(st.lists(finite, min_size=3, max_size=3))
def test_product_weight_matches_components(xs):
    ws = [one_plus_norm_sq(1), exp_quadratic(1, 0.01), polynomial_weight([2.0, 0.0, 0.0, 0.0, 1.0])]
    w = product_weight(ws)
    expected = np.prod([wi(np.array([x]))[0] for wi, x in zip(ws, xs)])
    assert w(np.array([xs]))[0] == pytest.approx(expected, rel=1e-14)


def test_product_weight_derivatives_match_finite_differences():
    ws = [polynomial_weight([1.0, 0.5, 1.0]), exp_quadratic(1, 0.3), one_plus_norm_sq(1)]
    w = product_weight(ws)
    x = np.array([[0.3, -0.7, 1.1]])
    h = 1e-5
    g = w.grad(x)[0]
    H = w.hess(x)[0]
    for i in range(3):
        e = np.zeros((1, 3))
        e[0, i] = h
        assert g[i] == pytest.approx((w(x + e)[0] - w(x - e)[0]) / (2 * h), rel=1e-7)
        fd = (w.grad(x + e)[0] - w.grad(x - e)[0]) / (2 * h)
        np.testing.assert_allclose(H[i], fd, rtol=1e-6, atol=1e-8)


# -- grids --------------------------------------------------------------------------------

def test_grid_validation():
    with pytest.raises(EmptyGrid):
        SampleGrid(np.zeros((0, 1)))
    with pytest.raises(ValueError):
        SampleGrid(np.array([[1.0], [1.0]]))
    with pytest.raises(ValueError):
        SampleGrid(np.array([[1.0]]), "random")


def test_grid_points_read_only(grid):
    with pytest.raises(ValueError):
        grid.points[0, 0] = 3.0


def test_lattice_and_quasi_random():
    g = SampleGrid.lattice([-1.0, 0.0], [1.0, 1.0], [0.5, 0.25])
    assert len(g) == 5 * 5 and g.dim == 2 and g.provenance == "regular-lattice"
    q = SampleGrid.quasi_random(64, [-1.0, -1.0], [1.0, 1.0], seed=3)
    assert len(q) == 64 and np.all(np.abs(q.points) <= 1.0)
    np.testing.assert_array_equal(q.points, SampleGrid.quasi_random(64, [-1.0, -1.0], [1.0, 1.0], seed=3).points)


# -- norms --------------------------------------------------------------------------------

def test_norm_of_rho_is_one(rho, grid):
    assert weighted_norm(rho, rho, grid).value == 1.0


def test_norm_of_zero(rho, grid):
    assert weighted_norm(lambda x: np.zeros(x.shape[0]), rho, grid).value == 0.0


def test_norm_of_identity_function(rho):
    g = SampleGrid.lattice([-10.0], [10.0], [1e-3])
    rep = weighted_norm(lambda x: x[:, 0], rho, g)
    assert rep.value == pytest.approx(0.5, abs=1e-6)
    assert abs(rep.argmax[0]) == pytest.approx(1.0, abs=1e-3)
    assert rep.grid_size == len(g)


def test_norm_rejects_non_finite(rho, grid):
    with pytest.raises(NonFiniteFunctionValue):
        weighted_norm(lambda x: 1.0 / x[:, 0], rho, SampleGrid.lattice([-1.0], [1.0], [0.5]))


@given(st.floats(min_value=-1e3, max_value=1e3, allow_nan=False))
@settings(max_examples=50)
def test_norm_homogeneity(c):
    rho, grid = one_plus_norm_sq(1), SampleGrid.lattice([-5.0], [5.0], [0.1])
    f = lambda x: np.sin(3 * x[:, 0]) + x[:, 0]  # noqa: E731
    scaled = weighted_norm(lambda x: c * f(x), rho, grid).value
    assert scaled == pytest.approx(abs(c) * weighted_norm(f, rho, grid).value, rel=1e-15, abs=0)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 5))
@settings(max_examples=50)
def test_norm_triangle_inequality(a, b, k):
    rho, grid = one_plus_norm_sq(1), SampleGrid.lattice([-5.0], [5.0], [0.1])
    f = lambda x: a * np.cos(k * x[:, 0])  # noqa: E731
    g = lambda x: b * x[:, 0] ** 2  # noqa: E731
    lhs = weighted_norm(lambda x: f(x) + g(x), rho, grid).value
    assert lhs <= weighted_norm(f, rho, grid).value + weighted_norm(g, rho, grid).value + 1e-12


@given(st.lists(st.floats(-8, 8), min_size=1, max_size=20))
@settings(max_examples=50)
def test_norm_grid_monotone(extra):
    rho, grid = one_plus_norm_sq(1), SampleGrid.lattice([-5.0], [5.0], [0.5])
    f = lambda x: np.sin(x[:, 0]) * x[:, 0]  # noqa: E731
    assert weighted_norm(f, rho, grid.refined(extra)).value >= weighted_norm(f, rho, grid).value


# -- Stone-Weierstrass surrogate --------------------------------------------------------------

def test_total_degree_exponents_graded_lex():
    assert total_degree_exponents(2, 2) == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
    assert len(total_degree_exponents(3, 4)) == math.comb(7, 3)


def test_sw_constant_exact(rho, grid):
    a = sw_approximate(lambda x: np.full(x.shape[0], 2.5), rho, 0, 10.0, grid)
    assert a.error.value <= 1e-12


@pytest.mark.parametrize("degree", [1, 2, 5])
def test_sw_linear_exact(rho, degree):
    g = SampleGrid.lattice([-3.0], [3.0], [0.01])
    a = sw_approximate(lambda x: x[:, 0], rho, degree, 10.0, g)
    assert a.error.value <= 1e-10


def test_sw_sin_matches_oracle(rho):
    g = SampleGrid.lattice([-3.0], [3.0], [0.01])
    errs = {}
    for d, expected in SW_SIN_BASELINE.items():
        errs[d] = sw_approximate(lambda x: np.sin(x[:, 0]), rho, d, 10.0, g).error.value
        assert errs[d] == pytest.approx(expected, rel=1e-8)
    seq = [errs[d] for d in sorted(errs)]
    assert all(b < a for a, b in zip(seq, seq[1:]))


@pytest.mark.parametrize("f", [np.cos, np.tanh, lambda x: np.exp(-x * x)])
def test_sw_error_non_increasing_in_degree(rho, f):
    g = SampleGrid.lattice([-3.0], [3.0], [0.01])
    errs = [sw_approximate(lambda x: f(x[:, 0]), rho, d, 10.0, g).inside_error.value for d in range(0, 10, 2)]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_sw_clamp_outside_sublevel_set(rho, grid):
    a = sw_approximate(lambda x: np.sin(x[:, 0]), rho, 9, 10.0, grid)
    assert np.all(np.abs(a(grid.points)) <= a.clamp)
    assert a.error.value >= a.inside_error.value


def test_sw_two_dimensional():
    w = one_plus_norm_sq(2)
    g = SampleGrid.lattice([-2.0, -2.0], [2.0, 2.0], [0.1, 0.1])
    a = sw_approximate(lambda x: x[:, 0] * x[:, 1] + 1.0, w, 2, 9.0, g)
    assert a.error.value <= 1e-10


def test_sw_ill_conditioned(rho):
    g = SampleGrid(np.array([[0.0], [0.5]]))
    with pytest.raises(IllConditionedFit):
        sw_approximate(np.sin, rho, 5, 10.0, g)


def test_sw_no_points_inside(rho):
    with pytest.raises(EmptyGrid):
        sw_approximate(lambda x: x[:, 0], rho, 1, 1.5, SampleGrid(np.array([[5.0], [6.0]])))


def test_weighted_abs_ignores_overflow_warnings():
    w = exp_quadratic(1)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = weighted_abs(np.array([0.0, 1.0]), w, np.array([[40.0], [0.0]]))
    assert out[0] == 0.0 and out[1] == 1.0
