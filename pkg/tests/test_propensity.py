import numpy as np
import pytest
from _oracles import newton_logit
from hypothesis import given, settings
from hypothesis import strategies as st

from rebar import ObservationalDataset, fit_propensity
from rebar.propensity import PenalizedLogisticRegression


def test_null_slopes_near_zero(rng):
    n, k = 4000, 3
    X = rng.normal(size=(n, k))
    z = (rng.random(n) < 0.3).astype(int)
    model = PenalizedLogisticRegression(penalty=0.0).fit(X, z)
    # oracle: unpenalized Newton fit and its standard errors
    b = newton_logit(X, z)
    D = np.column_stack([np.ones(n), X])
    p = 1 / (1 + np.exp(-D @ b))
    se = np.sqrt(np.diag(np.linalg.inv((D * (p * (1 - p))[:, None]).T @ D)))
    assert np.all(np.abs(model.coef_) < 3 * se[1:])
    assert abs(model.intercept_ - np.log(z.mean() / (1 - z.mean()))) < 3 * se[0]


def test_separable_toy_finite():
    x = np.array([0.0, 0, 0, 1, 1, 1])
    ds = ObservationalDataset(X=x[:, None], Z=x.astype(int), Y=np.zeros(6))
    pm = fit_propensity(ds, [0], penalty=1.0)
    assert np.all(np.isfinite(pm.coefficients))
    assert abs(pm.coefficients[1]) < 20


def test_penalty_zero_matches_mle(rng):
    n = 500
    X = rng.normal(size=(n, 2))
    z = (rng.random(n) < 1 / (1 + np.exp(-(0.3 + X @ [0.8, -0.5])))).astype(int)
    model = PenalizedLogisticRegression(penalty=1e-12).fit(X, z)
    b = newton_logit(X, z)
    np.testing.assert_allclose(np.r_[model.intercept_, model.coef_], b, atol=1e-6)


def test_objective_non_decreasing(rng):
    X = rng.normal(size=(60, 4))
    z = (X[:, 0] + rng.normal(size=60) > 0).astype(int)
    model = PenalizedLogisticRegression(penalty=0.5).fit(X, z)
    path = np.array(model.objective_path_)
    assert np.all(np.diff(path) >= -1e-12 * np.abs(path[:-1]))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 100), st.floats(-50, 50), st.integers(0, 3))
def test_logit_order_invariant_to_affine_rescale(scale, shift, col):
    rng = np.random.default_rng(7)
    X = rng.normal(size=(80, 4))
    z = (X[:, 0] - X[:, 2] + rng.normal(size=80) > 0).astype(int)
    a = PenalizedLogisticRegression().fit(X, z).decision_function(X)
    X2 = X.copy()
    X2[:, col] = scale * X2[:, col] + shift
    b = PenalizedLogisticRegression().fit(X2, z).decision_function(X2)
    np.testing.assert_allclose(a, b, atol=1e-7)


def test_more_covariates_than_treated(rng):
    n, k = 100, 20
    X = rng.normal(size=(n, k))
    z = np.zeros(n, int)
    z[rng.choice(n, 7, replace=False)] = 1
    ds = ObservationalDataset(X=X, Z=z, Y=np.zeros(n))
    pm = fit_propensity(ds, list(range(k)))
    assert np.all(np.isfinite(pm.logits))
    assert pm.coefficients.shape == (k + 1,)


def test_requires_both_classes():
    with pytest.raises(ValueError):
        PenalizedLogisticRegression().fit(np.zeros((3, 1)), [1, 1, 1])
