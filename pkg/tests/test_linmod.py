from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from misim.linmod import (
    ConvergenceError,
    SingularDesignError,
    cv_lambda_select,
    cv_mse,
    cv_predictions,
    en_objective,
    fit_elastic_net,
    fit_ols,
    lambda_grid,
    lambda_max,
)
from misim.rngkit import derive_stream
from misim.synthdata import GenParams, assign_folds, contaminate, generate_baseline


def folds(n, K=5, tag=0):
    return assign_folds(n, K, derive_stream(3, [("folds", tag)]))


def hand6():
    X = np.array([[1.0, 2.0], [2.0, 1.0], [3.0, 5.0], [4.0, 3.0], [5.0, 6.0], [6.0, 4.0]])
    y = np.array([3.1, 2.9, 8.2, 6.8, 11.1, 9.0])
    return X, y


# -- OLS ----------------------------------------------------------------------


def test_ols_interpolates_exact_plane():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 2))
    y = 1 + 0.5 * X[:, 0] + 1.5 * X[:, 1]
    fit = fit_ols(X, y)
    np.testing.assert_allclose(fit.coef, [1, 0.5, 1.5], atol=1e-12)
    assert fit.sigma2 == pytest.approx(0, abs=1e-25)


def test_ols_matches_normal_equations_oracle():
    X, y = hand6()
    A = np.column_stack([np.ones(6), X])
    oracle = np.linalg.solve(A.T @ A, A.T @ y)
    fit = fit_ols(X, y)
    np.testing.assert_allclose(fit.coef, oracle, atol=1e-10, rtol=0)
    resid = y - A @ oracle
    assert fit.sigma2 == pytest.approx(resid @ resid / 3, rel=1e-10)
    np.testing.assert_allclose(fit.cov, fit.sigma2 * np.linalg.inv(A.T @ A), rtol=1e-9)


def test_ols_clean_n500_near_truth():
    d = generate_baseline(500, GenParams(rho=0.6), derive_stream(4, [("ols500", 0)]))
    fit = fit_ols(np.column_stack([d.x1, d.x2]), d.y)
    assert np.all(np.abs(fit.coef - [1.0, 0.5, 1.5]) <= 3 * fit.se)


def test_ols_singular_design():
    X = np.column_stack([np.arange(10.0), 2 * np.arange(10.0)])
    with pytest.raises(SingularDesignError):
        fit_ols(X, np.arange(10.0))
    with pytest.raises(SingularDesignError):
        fit_ols(np.ones((3, 2)), np.ones(3))


def test_ols_intercept_only():
    fit = fit_ols(np.empty((5, 0)), np.array([1.0, 2, 3, 4, 5]))
    assert fit.coef == pytest.approx([3.0], abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_ols_residuals_orthogonal(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(25, 2))
    y = rng.normal(size=25)
    fit = fit_ols(X, y)
    A = np.column_stack([np.ones(25), X])
    assert np.abs(A.T @ (y - A @ fit.coef)).max() < 1e-9


# -- elastic net --------------------------------------------------------------


def test_en_lambda_zero_equals_ols():
    X, y = hand6()
    ols = fit_ols(X, y).coef
    en = fit_elastic_net(X, y, 0.5, 0.0).coef
    assert np.max(np.abs(en - ols)) <= 1e-6 * np.max(np.abs(ols))


@pytest.mark.parametrize("factor", [1.0, 1.5, 10.0])
def test_en_full_shrinkage_at_lambda_max(factor):
    X, y = hand6()
    lam = lambda_max(X, y, 0.5) * factor
    fit = fit_elastic_net(X, y, 0.5, lam)
    assert fit.coef[1:].tolist() == [0.0, 0.0]
    assert fit.coef[0] == pytest.approx(y.mean(), abs=1e-14)
    assert fit.selected == ()


def test_en_just_below_lambda_max_is_active():
    X, y = hand6()
    fit = fit_elastic_net(X, y, 0.5, 0.99 * lambda_max(X, y, 0.5))
    assert len(fit.selected) == 1


def test_en_local_optimality_probe():
    rng = np.random.default_rng(12)
    X = rng.normal(size=(12, 2))
    X = (X - X.mean(0)) / X.std(0)
    y = X @ [1.0, -0.7] + rng.normal(size=12)
    fit = fit_elastic_net(X, y, 0.5, 0.1)
    best = en_objective(fit.coef, X, y, 0.5, 0.1)
    probes = fit.coef + rng.uniform(-1e-3, 1e-3, size=(10_000, 3))
    values = np.array([en_objective(c, X, y, 0.5, 0.1) for c in probes])
    assert np.all(best <= values + 1e-15)


def test_en_objective_trace_monotone():
    X, y = hand6()
    fit = fit_elastic_net(X, y, 0.5, 0.05, trace=True)
    tr = np.array(fit.objective_trace)
    assert len(tr) >= 1
    assert np.all(np.diff(tr) <= 1e-14)


def test_en_nonconvergence_raises():
    rng = np.random.default_rng(1)
    x = rng.normal(size=50)
    X = np.column_stack([x, x + 1e-3 * rng.normal(size=50)])
    with pytest.raises(ConvergenceError) as info:
        fit_elastic_net(X, x + rng.normal(size=50), 0.5, 1e-4, max_sweeps=2)
    assert info.value.iterations == 2


def test_en_rejects_bad_args():
    X, y = hand6()
    with pytest.raises(ValueError):
        fit_elastic_net(X, y, 1.5, 0.1)
    with pytest.raises(ValueError):
        fit_elastic_net(X, y, 0.5, -1.0)


def test_lambda_grid_shape():
    g = lambda_grid(2.0)
    assert len(g) == 100
    assert g[0] == 2.0 and g[-1] == pytest.approx(2e-4, rel=1e-12)
    assert np.all(np.diff(g) < 0)


# -- cross-validation ---------------------------------------------------------


def test_cv_pure_noise_shrinks_slopes():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(200, 2))
    y = 3.0 + rng.normal(size=200)
    cv = cv_lambda_select(X, y, 0.5, folds(200))
    en = fit_elastic_net(X, y, 0.5, cv.lambda_min).coef[1:]
    assert np.linalg.norm(en) <= np.linalg.norm(fit_ols(X, y).coef[1:])


def test_cv_lambda_min_bit_reproducible():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(60, 2))
    y = X @ [1.0, 0.3] + rng.normal(size=60)
    f = folds(60)
    assert cv_lambda_select(X, y, 0.5, f).lambda_min == cv_lambda_select(X, y, 0.5, f).lambda_min


def test_cv_strong_signal_picks_small_lambda():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(200, 2))
    signal = X @ [2.0, 1.0]
    y = signal + rng.normal(scale=np.sqrt(signal.var() / 9), size=200)  # R^2 near 0.9
    cv = cv_lambda_select(X, y, 0.5, folds(200))
    assert cv.index_min >= 50


def test_cv_mse_exact_linear_is_zero():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(40, 2))
    y = 1 + X @ [0.5, 1.5]
    assert cv_mse("ols", X, y, folds(40)) == pytest.approx(0.0, abs=1e-20)


def test_cv_predictions_out_of_fold():
    X, y = hand6()
    X = np.vstack([X, X + 0.5])
    y = np.concatenate([y, y + 1.0])
    f = folds(12, K=3)
    pred = cv_predictions("ols", X, y, f)
    for k in range(3):
        tr, te = f.train_rows(k), f.test_rows(k)
        np.testing.assert_allclose(pred[te], fit_ols(X[tr], y[tr]).predict(X[te]))


def test_cv_rejects_mismatched_folds():
    X, y = hand6()
    with pytest.raises(ValueError):
        cv_mse("ols", X, y, folds(10))


def test_cv_mse_clean_n500_reference_band():
    d = generate_baseline(500, GenParams(rho=0.6), derive_stream(21, [("cv500", 0)]))
    v = cv_mse("ols", np.column_stack([d.x1, d.x2]), d.y, folds(500))
    assert 1.9 <= v <= 2.7


def test_cv_mse_contaminated_en_reference_band():
    s = derive_stream(22, [("cv500", 1)])
    d = contaminate(generate_baseline(500, GenParams(rho=0.6), s.child("d", 0)), 0.10, s.child("c", 0))
    v = cv_mse("en", np.column_stack([d.x1, d.x2]), d.y, folds(500))
    assert 1.7 <= v <= 2.4
