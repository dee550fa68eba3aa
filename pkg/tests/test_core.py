import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import interpolate, stats

from livcurve import (Observation, Sample, SupportSet, make_indicator_model, make_linear_origin_model,
                      make_spline_model, make_weight_kde, make_weight_tapered, make_weight_truncnorm)
from livcurve.quadrature import make_gauss_legendre, rule_for
from livcurve.simulation import SimConfig, generate

from conftest import SUPPORT


# --- Sample / SupportSet -------------------------------------------------------

def test_sample_rejects_bad_treatment():
    with pytest.raises(ValueError, match="0/1"):
        Sample(np.zeros((3, 1)), [0, 1, 2], [0, 1, 2], [0, 0, 0])


def test_sample_rejects_nonfinite_and_mismatch():
    with pytest.raises(ValueError, match="non-finite"):
        Sample(np.zeros((2, 1)), [0, np.nan], [0, 1], [0, 0])
    with pytest.raises(ValueError, match="length"):
        Sample(np.zeros((3, 1)), [0, 1], [0, 1], [0, 0])
    with pytest.raises(ValueError, match="empty"):
        Sample(np.zeros((0, 1)), [], [], [])


def test_sample_v_indices_checked():
    with pytest.raises(ValueError, match="effect-modifier"):
        Sample(np.zeros((2, 2)), [0, 1], [0, 1], [0, 0], v_indices=(2,))


def test_sample_roundtrip_observations():
    s = Sample(np.arange(6.0).reshape(3, 2), [0.1, 0.2, 0.3], [0, 1, 1], [1.0, 2.0, 3.0], (1,))
    back = Sample.from_observations(list(s.observations()), v_indices=(1,))
    np.testing.assert_array_equal(back.x, s.x)
    np.testing.assert_array_equal(back.v, s.x[:, [1]])


def test_from_observations_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        Sample.from_observations([Observation(np.zeros(2), 0.0, 0, 0.0), Observation(np.zeros(3), 0.0, 1, 0.0)])


def test_support_set_validation():
    with pytest.raises(ValueError):
        SupportSet(1.0, 1.0)
    with pytest.raises(ValueError):
        SupportSet(0.0, np.inf)
    assert SUPPORT.interior(np.array([-1.9, 0.0, 1.9])).tolist() == [False, True, False]


# --- spline models ----------------------------------------------------------------

def test_constant_basis():
    m = make_spline_model(1, SUPPORT)
    t = np.linspace(-1.5, 1.5, 7)
    np.testing.assert_array_equal(m.basis(t), np.ones((7, 1)))
    np.testing.assert_array_equal(m.basis_deriv_t(t), np.zeros((7, 1)))


def test_linear_basis():
    m = make_spline_model(2, SUPPORT)
    np.testing.assert_array_equal(m.basis(0.5), [1.0, 0.5])
    np.testing.assert_array_equal(m.basis_deriv_t(0.5), [0.0, 1.0])


def test_spline_rejects_df_zero():
    with pytest.raises(ValueError):
        make_spline_model(0, SUPPORT)


def test_natural_spline_matches_interpolation_oracle():
    # each basis column must be a natural cubic spline on the knots, so the
    # natural interpolant of its knot values reproduces it everywhere
    m = make_spline_model(4, SUPPORT)
    knots = m.knots
    t = np.concatenate([[0.0], np.linspace(-1.9, 1.9, 41)])
    vals = m.basis(t)
    for j in range(4):
        oracle = interpolate.CubicSpline(knots, m.basis(knots)[:, j], bc_type="natural")
        np.testing.assert_allclose(vals[:, j], oracle(t), atol=1e-12)


def test_spline_columns_independent():
    m = make_spline_model(5, SUPPORT)
    grid = np.linspace(-1.9, 1.9, 50)
    assert np.linalg.matrix_rank(m.basis(grid)) == 5


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.lists(st.floats(-3, 3), min_size=6, max_size=6),
       st.lists(st.floats(-3, 3), min_size=6, max_size=6), st.floats(-1.85, 1.85))
def test_linear_model_affine_in_psi(df, p1, p2, t):
    m = make_spline_model(df, SUPPORT)
    a, b = np.array(p1[:df]), np.array(p2[:df])
    lhs = m.gamma(t, None, a + b)
    rhs = m.gamma(t, None, a) + m.gamma(t, None, b) - m.gamma(t, None, np.zeros(df))
    assert lhs == pytest.approx(rhs, abs=1e-12 * (1 + abs(lhs)))


@pytest.mark.parametrize("df", [1, 2, 3, 4, 6])
def test_basis_derivative_matches_finite_difference(df):
    m = make_spline_model(df, SUPPORT)
    t = np.linspace(-1.8, 1.8, 37)
    h = 1e-6
    fd = (m.basis(t + h) - m.basis(t - h)) / (2 * h)
    np.testing.assert_allclose(m.basis_deriv_t(t), fd, atol=1e-6)


def test_indicator_model_uses_v():
    m = make_indicator_model([0.0, 1.0])
    v = np.array([[0.0], [1.0], [1.0]])
    np.testing.assert_array_equal(m.gamma(np.zeros(3), v, np.array([2.0, 5.0])), [2.0, 5.0, 5.0])
    with pytest.raises(ValueError):
        m.basis(0.0, None)


def test_linear_origin_model():
    m = make_linear_origin_model()
    assert m.gamma(0.7, None, np.array([2.0])) == pytest.approx(1.4)


# --- weights ------------------------------------------------------------------------

def test_truncnorm_weight_outside_support(tn_weight):
    assert tn_weight.eval(2.5) == 0.0
    assert tn_weight.deriv_t(2.5) == 0.0


def test_truncnorm_weight_symmetric(tn_weight):
    t = np.linspace(0, 1.89, 20)
    np.testing.assert_allclose(tn_weight.eval(t), tn_weight.eval(-t), rtol=0, atol=0)


def test_truncnorm_weight_value_and_normalisation(tn_weight):
    expected = stats.norm.pdf(0) / (stats.norm.cdf(1.9) - stats.norm.cdf(-1.9))
    assert tn_weight.eval(0.0) == pytest.approx(expected, rel=1e-14)
    rule = make_gauss_legendre(SUPPORT, 64)
    assert np.sum(rule.weights * tn_weight.eval(rule.nodes)) == pytest.approx(1.0, abs=1e-8)


def test_truncnorm_weight_rejects_sigma():
    with pytest.raises(ValueError):
        make_weight_truncnorm(0.0, 0.0, SUPPORT)


def test_tapered_weight_is_c1(tapered_weight):
    # value and derivative go to zero at the ends and are continuous at the joins
    assert tapered_weight.eval(-1.9 + 1e-9) == pytest.approx(0.0, abs=1e-9)
    assert tapered_weight.deriv_t(1.9 - 1e-9) == pytest.approx(0.0, abs=1e-7)
    for join in tapered_weight.breakpoints:
        lo, hi = tapered_weight.deriv_t(join - 1e-9), tapered_weight.deriv_t(join + 1e-9)
        assert lo == pytest.approx(hi, abs=1e-6)
    t = np.linspace(-1.85, 1.85, 101)
    fd = (tapered_weight.eval(t + 1e-6) - tapered_weight.eval(t - 1e-6)) / 2e-6
    np.testing.assert_allclose(tapered_weight.deriv_t(t), fd, atol=1e-6)


def test_taper_fraction_validated(tn_weight):
    with pytest.raises(ValueError):
        make_weight_tapered(tn_weight, 0.0)
    with pytest.raises(ValueError):
        make_weight_tapered(tn_weight, 0.6)


def test_kde_point_mass():
    h = 0.3
    w = make_weight_kde(np.full(10, 0.4), bandwidth=h, support=SupportSet(-2, 2))
    assert w.eval(0.4) == pytest.approx(stats.norm.pdf(0) / h, rel=1e-12)
    assert w.eval(0.4) > w.eval(0.5) and w.eval(0.4) > w.eval(0.3)


def test_kde_mass_inside_support():
    rng = np.random.default_rng(3)
    z = rng.normal(size=300)
    w = make_weight_kde(z)
    bw = w.bandwidth
    lo, hi = w.support.t_lo, w.support.t_hi
    expected = np.mean(stats.norm.cdf((hi - z) / bw) - stats.norm.cdf((lo - z) / bw))
    rule = make_gauss_legendre(w.support, 128)
    assert np.sum(rule.weights * w.eval(rule.nodes)) == pytest.approx(expected, abs=1e-8)
    assert lo == pytest.approx(np.quantile(z, 0.025))


def test_kde_rejects_bandwidth():
    with pytest.raises(ValueError):
        make_weight_kde(np.arange(5.0), bandwidth=0.0)
    with pytest.raises(ValueError):
        make_weight_kde(np.arange(5.0), bandwidth=-1.0)


def test_kde_matches_histogram_on_simulated_instrument():
    z = generate(SimConfig(n=20000), 11).sample.z
    w = make_weight_kde(z)
    half = 0.05
    p = np.mean(np.abs(z) < half)
    hist = p / (2 * half)
    se = np.sqrt(p * (1 - p) / z.size) / (2 * half)
    assert abs(float(w.eval(0.0)) - hist) < 3 * se


def test_kde_derivative_matches_finite_difference():
    z = np.random.default_rng(0).normal(size=50)
    w = make_weight_kde(z)
    t = np.linspace(w.support.t_lo + 0.05, w.support.t_hi - 0.05, 15)
    fd = (w.eval(t + 1e-6) - w.eval(t - 1e-6)) / 2e-6
    np.testing.assert_allclose(w.deriv_t(t), fd, atol=1e-6)


def test_kde_grid_evaluation_shape():
    w = make_weight_kde(np.random.default_rng(1).normal(size=40))
    grid = np.tile(np.linspace(-1, 1, 7), (5, 1))
    out = w.eval(grid)
    assert out.shape == (5, 7)
    np.testing.assert_array_equal(out[0], out[4])


@settings(max_examples=50, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(0.3, 3.0), st.floats(0.02, 0.5))
def test_weights_vanish_outside_support(mu, sigma, frac):
    base = make_weight_truncnorm(mu, sigma, SUPPORT)
    kde = make_weight_kde(np.linspace(-1, 1, 9), bandwidth=sigma, support=SUPPORT)
    outside = np.concatenate([np.linspace(-3, -1.9, 12), np.linspace(1.9, 3, 12)])
    for w in (base, make_weight_tapered(base, frac), kde):
        assert np.all(w.eval(outside) == 0)
        assert np.all(w.deriv_t(outside) == 0)
        inside = np.linspace(-1.89, 1.89, 25)
        assert np.all(w.eval(inside) >= 0)


def test_rule_for_uses_breakpoints(tapered_weight):
    rule = rule_for(tapered_weight, 16)
    assert rule.size == 48
    assert np.sum(rule.weights) == pytest.approx(3.8, abs=1e-12)
