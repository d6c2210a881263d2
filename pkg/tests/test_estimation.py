from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safedoe.config import load_case
from safedoe.errors import StatisticsError
from safedoe.estimation import (chi2_quantile, information_matrix, laplace_posterior, mle_fit, statistics,
                                t_quantile, weighted_chi2)


class LinearModel:
    """y = [u1, u2] @ theta per output pair; exact Gaussian posterior."""

    n_theta = 2
    n_outputs = 2

    def predict(self, U, theta):
        U = np.atleast_2d(U)
        # theta may be one vector or one row per design (batched screening)
        z = np.sum(U * theta, axis=1) if np.ndim(theta) == 2 else U @ theta
        return np.column_stack([z, 2.0 * z])

    def jacobian(self, U, theta):
        U = np.atleast_2d(U)
        return np.stack([U, 2.0 * U], axis=1)

    def default_bounds(self):
        return np.full(2, -10.0), np.full(2, 10.0)


def test_chi2_reference_quantile():
    assert chi2_quantile(0.95, 56) == pytest.approx(74.47, abs=0.05)


def test_t_reference_quantiles():
    # scipy values, frozen
    assert t_quantile(0.95, 11) == pytest.approx(1.7958848187, rel=1e-9)
    assert t_quantile(0.975, 11) == pytest.approx(2.2009851601, rel=1e-9)


def test_linear_posterior_equals_closed_form():
    rng = np.random.default_rng(0)
    U = rng.uniform(-1, 1, (12, 2))
    sigma = np.array([0.1, 0.3])
    model = LinearModel()
    Y = model.predict(U, np.array([1.0, -2.0])) + sigma * rng.standard_normal((12, 2))
    fit = mle_fit(model, U, Y, sigma, n_starts=3)
    Xw = np.vstack([U / sigma[0], 2 * U / sigma[1]])
    yw = np.concatenate([Y[:, 0] / sigma[0], Y[:, 1] / sigma[1]])
    theta_ls, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    np.testing.assert_allclose(fit.theta, theta_ls, rtol=1e-8)
    post = laplace_posterior(fit.theta, model, U, Y, sigma)
    np.testing.assert_allclose(post.cov, np.linalg.inv(Xw.T @ Xw), rtol=1e-10)
    assert post.dof == 22
    assert fit.chi2 == pytest.approx(weighted_chi2(model, U, Y, sigma, fit.theta), rel=1e-10)


def test_wald_coverage_linear_model():
    rng = np.random.default_rng(1)
    U = rng.uniform(-1, 1, (10, 2))
    sigma = np.array([0.2, 0.2])
    model = LinearModel()
    truth = np.array([0.5, 1.5])
    hits = 0
    n = 300
    for _ in range(n):
        Y = model.predict(U, truth) + sigma * rng.standard_normal((10, 2))
        fit = mle_fit(model, U, Y, sigma, theta0=truth, n_starts=1)
        hits += laplace_posterior(fit.theta, model, U, Y, sigma).wald_contains(truth)
    # binomial(300, 0.95) has sd ~1.3 %
    assert 0.90 <= hits / n <= 0.99


def test_zero_residual_kinetic_fit_recovers_parameters():
    case = load_case("case1")
    theta = np.array([8.0, 29.0, 5.0, 35.0])
    U = np.vstack([case.preliminary, [[70.0, 0.005], [95.0, 0.007], [85.0, 0.0045]]])
    Y = case.model.predict(U, theta)
    fit = mle_fit(case.model, U, Y, case.sigma, bounds=case.theta_bounds, n_starts=10)
    np.testing.assert_allclose(fit.theta, theta, rtol=1e-6)
    assert fit.chi2 < 1e-8
    post = laplace_posterior(fit.theta, case.model, U, Y, case.sigma)
    rep = statistics(fit.theta, post.cov, fit.chi2, Y.size)
    assert rep.chi2_pass
    # k0 and E are nearly collinear over 60-100 degC: pre-exponential factors are not significant
    assert not rep.t_pass[0] and rep.t_pass[1]


def test_zero_residual_fit_in_reference_form_passes_statistics():
    case = load_case("case1")
    model = replace(case.model, parametrization="reference")
    theta = model.from_reference(case.model.to_reference(np.array([8.0, 29.0, 5.0, 35.0])))
    lo, hi = np.array([1e-7, 1.0, 1e-7, 1.0]), np.array([1.0, 80.0, 1.0, 80.0])
    Y = model.predict(case.preliminary, theta)
    fit = mle_fit(model, case.preliminary, Y, case.sigma, bounds=(lo, hi), n_starts=10)
    np.testing.assert_allclose(fit.theta, theta, rtol=1e-6)
    post = laplace_posterior(fit.theta, model, case.preliminary, Y, case.sigma)
    assert statistics(fit.theta, post.cov, fit.chi2, Y.size).passed


def test_statistics_needs_positive_dof():
    with pytest.raises(StatisticsError):
        statistics(np.ones(4), np.eye(4), 1.0, 4)


def test_t_values_use_two_sided_scale_and_one_sided_reference():
    rep = statistics(np.array([2.0]), np.array([[0.25]]), 3.0, 12)
    assert rep.t_values[0] == pytest.approx(2.0 / (0.5 * t_quantile(0.975, 11)))
    assert rep.t_ref == pytest.approx(t_quantile(0.95, 11))
    assert rep.chi2_ref == pytest.approx(chi2_quantile(0.95, 11))


def test_singular_information_uses_pseudo_inverse():
    case = load_case("case1")
    theta = np.array([8.0, 29.0, 5.0, 35.0])
    U = case.preliminary[:1]
    post = laplace_posterior(theta, case.model, U, case.model.predict(U, theta), case.sigma)
    assert post.singular
    assert np.all(np.isfinite(post.cov))


def test_information_matrix_is_symmetric():
    case = load_case("case1")
    M = information_matrix(case.model, case.preliminary, np.array([8.0, 29.0, 5.0, 35.0]), case.sigma)
    np.testing.assert_allclose(M, M.T)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 50.0), st.floats(1e-3, 10.0), st.integers(5, 60))
def test_t_value_monotone_in_estimate(theta, sd, n_obs):
    a = statistics(np.array([theta]), np.array([[sd ** 2]]), 1.0, n_obs)
    b = statistics(np.array([2 * theta]), np.array([[sd ** 2]]), 1.0, n_obs)
    assert b.t_values[0] == pytest.approx(2 * a.t_values[0])
