import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msm_loal.glm_core import (
    SeparationError,
    SingularDesignError,
    fit_linear_wls,
    fit_logistic,
    ols_model_se,
    sandwich_se,
    solve_normal,
)


def test_wls_three_points_by_hand():
    # points (0, 1), (1, 2), (2, 4) with weights 1, 2, 1:
    # sw = 4, mean x = 1, mean y = (1 + 4 + 4) / 4 = 2.25,
    # Sxy = 1*(-1)(-1.25) + 2*0 + 1*(1)(1.75) = 3, Sxx = 2, slope 1.5, intercept 0.75
    X = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
    y = np.array([1.0, 2.0, 4.0])
    fit = fit_linear_wls(X, y, np.array([1.0, 2.0, 1.0]))
    np.testing.assert_allclose(fit.coefficients, [0.75, 1.5], atol=1e-12)


def test_hc0_sandwich_two_groups_by_hand():
    # two-group design: the HC0 variance of each group mean is sum(r^2) / n_g^2
    X = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], float)
    y = np.array([1.0, 3.0, 2.0, 6.0])
    fit = fit_linear_wls(X, y)
    np.testing.assert_allclose(fit.coefficients, [2.0, 4.0])
    se = sandwich_se(X, y, None, fit)
    np.testing.assert_allclose(se, [np.sqrt(2 / 4), np.sqrt(8 / 4)], atol=1e-12)


def test_clustered_sandwich_sums_scores_within_cluster():
    X = np.ones((4, 1))
    y = np.array([1.0, 2.0, 3.0, 6.0])
    fit = fit_linear_wls(X, y)
    se = sandwich_se(X, y, None, fit, cluster=[0, 0, 1, 1])
    # residuals -2, -1, 0, 3: cluster sums -3 and 3, variance 18 / 16
    assert se[0] == pytest.approx(np.sqrt(18 / 16))


def test_ols_model_se_matches_textbook():
    X = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0], [1.0, 3.0]])
    y = np.array([0.0, 1.0, 1.0, 3.0])
    fit = fit_linear_wls(X, y)
    r = y - X @ fit.coefficients
    s2 = r @ r / 2
    expect = np.sqrt(np.diag(np.linalg.inv(X.T @ X)) * s2)
    np.testing.assert_allclose(ols_model_se(X, y, None, fit), expect, atol=1e-12)


def test_logistic_two_by_two_table_closed_form():
    # saturated 2x2 table: the slope is the log odds ratio
    x = np.array([0] * 10 + [1] * 10, float)
    y = np.array([1] * 3 + [0] * 7 + [1] * 6 + [0] * 4, float)
    fit = fit_logistic(np.column_stack([np.ones(20), x]), y)
    np.testing.assert_allclose(fit.coefficients, [np.log(3 / 7), np.log(6 / 4) - np.log(3 / 7)], atol=1e-9)
    assert fit.converged


def test_logistic_fixed_zero_columns():
    rng = np.random.default_rng(3)
    X = np.column_stack([np.ones(200), rng.normal(size=(200, 2))])
    y = (rng.random(200) < 0.4).astype(float)
    fit = fit_logistic(X, y, fixed_zero_mask=[False, True, False])
    sub = fit_logistic(X[:, [0, 2]], y)
    assert fit.coefficients[1] == 0
    np.testing.assert_allclose(fit.coefficients[[0, 2]], sub.coefficients, atol=1e-10)


def test_separation_is_reported():
    X = np.column_stack([np.ones(6), [0, 1, 2, 3, 4, 5]])
    y = np.array([0, 0, 0, 1, 1, 1], float)
    with pytest.raises(SeparationError):
        fit_logistic(X, y)


def test_collinear_columns_are_named():
    X = np.column_stack([np.ones(5), np.arange(5.0), 2 * np.arange(5.0)])
    with pytest.raises(SingularDesignError) as err:
        fit_linear_wls(X, np.arange(5.0), columns=["one", "x", "twice_x"])
    assert "x" in str(err.value)


def test_solve_normal_identity():
    np.testing.assert_allclose(solve_normal(np.eye(3) * 2, np.ones(3)), np.full(3, 0.5))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(8, 60))
def test_wls_normal_equations_hold(seed, n):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
    y = rng.normal(size=n)
    w = rng.uniform(0.1, 3, n)
    fit = fit_linear_wls(X, y, w)
    np.testing.assert_allclose(X.T @ (w * (y - X @ fit.coefficients)), 0, atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(30, 120))
def test_logistic_score_is_zero(seed, n):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
    y = (rng.random(n) < 1 / (1 + np.exp(-X @ [0.2, 0.5, -0.5]))).astype(float)
    try:
        fit = fit_logistic(X, y)
    except SeparationError:
        return
    p = 1 / (1 + np.exp(-X @ fit.coefficients))
    np.testing.assert_allclose(X.T @ (y - p), 0, atol=1e-6)
