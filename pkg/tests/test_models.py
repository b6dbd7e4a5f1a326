import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import fsolve

from enkf_rare.models import (
    GaussianDensity,
    Projection,
    RareEvent,
    charney_devore_coefficients,
    charney_devore_model,
    double_well_force,
    double_well_model,
    double_well_potential,
    langevin_model,
    make_model,
    project,
)

KAPPA = 2**-5 * np.pi**2


def test_double_well_drift_at_origin():
    m = double_well_model(0.5)
    assert m.drift(np.array([0.0]))[0] == 0.0


def test_double_well_drift_at_one():
    m = double_well_model(0.5)
    assert m.drift(np.array([1.0]))[0] == pytest.approx(-(-8 / 36 + 0.5), abs=5e-5)
    assert round(float(m.drift(np.array([1.0]))[0]), 4) == -0.2778


def test_double_well_diffusion():
    m = double_well_model(0.5)
    b = m.diffusion(np.array([[0.3], [-2.0]]))
    assert b.shape == (2, 1, 1)
    np.testing.assert_array_equal(b, 0.5)


@pytest.mark.parametrize("b", [0.0, -0.1])
def test_double_well_rejects_nonpositive_diffusion(b):
    with pytest.raises(ValueError):
        double_well_model(b)


@given(st.floats(-5, 5))
def test_double_well_drift_is_odd(u):
    assert double_well_force(-u) == pytest.approx(-double_well_force(u), abs=1e-15)


@given(st.floats(-3, 3).filter(lambda u: abs(u) > 1e-2))
def test_double_well_drift_matches_potential_gradient(u):
    h = 1e-6
    fd = -(double_well_potential(u + h) - double_well_potential(u - h)) / (2 * h)
    assert double_well_force(u) == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_langevin_examples():
    m = langevin_model(KAPPA, 1.0)
    np.testing.assert_array_equal(m.drift(np.array([0.0, 0.0])), [0.0, 0.0])
    col = m.diffusion(np.array([0.0, 0.0]))
    assert col.shape == (2, 1)
    assert col[0, 0] == 0.0
    assert round(col[1, 0], 4) == 0.7854
    # -V'(1) - 2 kappa, with -V'(1) = -0.2778
    a = m.drift(np.array([1.0, 2.0]))
    assert a[0] == 2.0
    assert a[1] == pytest.approx(-(0.5 - 8 / 36) - 2 * KAPPA, rel=1e-12)


def test_langevin_second_component_matches_potential():
    m = langevin_model(KAPPA, 1.0)
    h = 1e-6
    for u in (-1.3, 0.4, 2.1):
        fd = -(double_well_potential(u + h) - double_well_potential(u - h)) / (2 * h)
        assert m.drift(np.array([u, 0.0]))[1] == pytest.approx(fd, rel=1e-6)


@pytest.mark.parametrize("kappa,temp", [(0.0, 1.0), (0.3, 0.0), (-1.0, 1.0)])
def test_langevin_rejects_bad_parameters(kappa, temp):
    with pytest.raises(ValueError):
        langevin_model(kappa, temp)


def test_cdv_eta():
    c = charney_devore_coefficients()
    assert round(c["eta"], 4) == 1.4405


def test_cdv_diffusion():
    m = charney_devore_model(0.01)
    b = m.diffusion(np.zeros(6))
    assert b.shape == (6, 6)
    np.testing.assert_allclose(b, math.sqrt(0.02) * np.eye(6), rtol=1e-15)
    assert round(b[0, 0], 4) == 0.1414


def test_cdv_fixed_point():
    m = charney_devore_model(0.0)
    x0 = np.array([0.9, 0.0, -0.1, -0.7, 0.0, 0.0])
    root = fsolve(lambda x: m.drift(x), x0, xtol=1e-14)
    assert np.linalg.norm(m.drift(root)) < 1e-8


def test_cdv_coefficients_regenerate():
    c = charney_devore_coefficients()
    s2, q, beta, gamma = math.sqrt(2), 0.5, 1.25, 0.2
    for m in (1, 2):
        assert c[f"alpha{m}"] == pytest.approx(
            8 * s2 * m * m * (q * q + m * m - 1) / (math.pi * (4 * m * m - 1) * (q * q + m * m)), rel=1e-12)
        assert c[f"beta{m}"] == pytest.approx(beta * q * q / (q * q + m * m), rel=1e-12)
        assert c[f"gamma{m}"] == pytest.approx(
            4 * m**3 * s2 * q * gamma / (math.pi * (4 * m * m - 1) * (q * q + m * m)), rel=1e-12)
        assert c[f"gamma_tilde{m}"] == pytest.approx(4 * m * s2 * q * gamma / (math.pi * (4 * m * m - 1)),
                                                     rel=1e-12)
        assert c[f"delta{m}"] == pytest.approx(
            64 * s2 * (q * q - m * m + 1) / (15 * math.pi * (q * q + m * m)), rel=1e-12)
    assert c["eta"] == pytest.approx(16 * s2 / (5 * math.pi), rel=1e-12)


def test_cdv_coefficients_do_not_depend_on_noise():
    a = charney_devore_model(0.01).params
    b = charney_devore_model(0.5).params
    assert a["alpha1"] == b["alpha1"] and a["delta2"] == b["delta2"]


@pytest.mark.parametrize("name,d", [("double-well", 1), ("langevin", 2), ("cdv", 6)])
def test_models_are_finite_with_right_shapes(name, d, rng):
    m = make_model(name)
    x = rng.normal(size=(50, d))
    assert np.all(np.isfinite(m.drift(x)))
    assert m.diffusion(x).shape == (50, d, m.dim_noise)


def test_make_model_unknown():
    with pytest.raises(ValueError):
        make_model("lorenz")


def test_project_examples():
    assert project(Projection([0, 1]), [3, 5]) == 5
    assert project(Projection.coordinate(0, 6), np.eye(6)[0]) == 1
    assert project(Projection([2]), [1.5]) == 3


def test_project_dimension_mismatch():
    with pytest.raises(ValueError):
        project(Projection([0, 1]), [1.0, 2.0, 3.0])


def test_projection_rejects_zero_row():
    with pytest.raises(ValueError):
        Projection([0.0, 0.0])


def test_rare_event_needs_positive_horizon():
    with pytest.raises(ValueError):
        RareEvent(1.0, Projection([1.0]), (1.0, 1.0))
    assert RareEvent(1.0, Projection([1.0]), (2.0, 3.5)).length == 1.5


def test_gaussian_rejects_bad_covariance():
    with pytest.raises(ValueError):
        GaussianDensity([0, 0], [[1, 0.5], [0.4, 1]])
    with pytest.raises(ValueError):
        GaussianDensity([0, 0], [[1, 0], [0, -1]])


@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3),
       st.lists(st.floats(0.1, 2.0), min_size=3, max_size=3))
def test_gaussian_logpdf_matches_scipy(mean, std):
    from scipy.stats import multivariate_normal

    g = GaussianDensity.from_std(mean, std)
    x = np.array([[0.1, -0.2, 0.3], [1.0, 1.0, 1.0]])
    ref = multivariate_normal(mean, np.diag(np.square(std))).logpdf(x)
    np.testing.assert_allclose(g.logpdf(x), ref, rtol=1e-10)


def test_gaussian_from_samples_moments(rng):
    cov = np.array([[1.0, 0.6], [0.6, 2.0]])
    x = rng.multivariate_normal([1.0, -1.0], cov, size=200_000)
    g = GaussianDensity.from_samples(x)
    np.testing.assert_allclose(g.mean, [1.0, -1.0], atol=0.01)
    np.testing.assert_allclose(g.covariance, cov, atol=0.02)
    assert g.marginal(Projection([0, 1])) == pytest.approx((g.mean[1], math.sqrt(g.covariance[1, 1])))


def test_gaussian_singular_covariance_still_samples(rng):
    g = GaussianDensity([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]])
    x = g.sample(rng, 1000)
    np.testing.assert_allclose(x[:, 0], x[:, 1], atol=1e-12)
