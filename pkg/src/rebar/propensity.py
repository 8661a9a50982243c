"""Ridge-penalized logistic propensity model fitted by IRLS."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from .data import ObservationalDataset

__all__ = [
    "DEFAULT_PENALTY",
    "ConvergenceError",
    "SeparationError",
    "PenalizedLogisticRegression",
    "PropensityModel",
    "fit_propensity",
]

# Gaussian prior with scale 2.5 on standardized slopes: penalty = 1 / 2.5**2
DEFAULT_PENALTY = 1.0 / 2.5**2


class ConvergenceError(RuntimeError):
    pass


class SeparationError(ConvergenceError):
    pass


def _objective(beta, Xt, z, lam):
    eta = Xt @ beta
    loglik = np.sum(z * log_expit(eta) + (1 - z) * log_expit(-eta))
    return loglik - 0.5 * lam * np.sum(beta[1:] ** 2)


class PenalizedLogisticRegression(ClassifierMixin, BaseEstimator):
    """Logistic regression with an L2 penalty on the slopes.

    Maximizes ``loglik(beta) - penalty/2 * ||slopes||^2`` by Newton (IRLS)
    steps with step halving. The intercept is never penalized. With
    ``standardize=True`` covariates are centered and scaled to unit SD
    before fitting and coefficients are reported on the original scale.

    Parameters
    ----------
    penalty : float, default=0.16
        Ridge strength on standardized slopes; the default corresponds to
        independent N(0, 2.5^2) priors.
    standardize : bool, default=True
    max_iter : int, default=100
    tol : float, default=1e-8
        Convergence threshold on the max absolute gradient.

    Attributes
    ----------
    coef_ : ndarray of shape (p,)
    intercept_ : float
    n_iter_ : int
    objective_path_ : list of float
        Penalized log-likelihood after each accepted step.
    """

    def __init__(self, penalty=DEFAULT_PENALTY, standardize=True, max_iter=100, tol=1e-8):
        self.penalty = penalty
        self.standardize = standardize
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        if self.penalty < 0:
            raise ValueError("penalty must be nonnegative")
        classes = np.unique(y)
        if not np.all(np.isin(classes, (0, 1))) or len(classes) != 2:
            raise ValueError("treatment must be binary with both classes present")
        self.classes_ = np.array([0, 1])
        z = y.astype(float)
        n, p = X.shape

        if self.standardize:
            mu = X.mean(axis=0)
            sd = X.std(axis=0)
            sd[sd == 0] = 1.0
        else:
            mu = np.zeros(p)
            sd = np.ones(p)
        Xt = np.column_stack([np.ones(n), (X - mu) / sd])
        lam = float(self.penalty)
        D = np.ones(p + 1)
        D[0] = 0.0

        zbar = z.mean()
        beta = np.zeros(p + 1)
        beta[0] = np.log(zbar / (1 - zbar))
        obj = _objective(beta, Xt, z, lam)
        path = [obj]
        converged = False
        n_iter = 0
        for n_iter in range(1, self.max_iter + 1):
            prob = expit(Xt @ beta)
            grad = Xt.T @ (z - prob) - lam * D * beta
            if np.max(np.abs(grad)) < self.tol:
                converged = True
                n_iter -= 1
                break
            w = prob * (1 - prob)
            H = (Xt * w[:, None]).T @ Xt + lam * np.diag(D)
            try:
                step = np.linalg.solve(H, grad)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(H, grad, rcond=None)[0]
            t = 1.0
            for _ in range(60):
                cand = beta + t * step
                cand_obj = _objective(cand, Xt, z, lam)
                if cand_obj >= obj - 1e-12 * abs(obj):
                    break
                t *= 0.5
            else:
                break
            beta, obj = cand, max(cand_obj, obj)
            path.append(obj)
        else:
            prob = expit(Xt @ beta)
            grad = Xt.T @ (z - prob) - lam * D * beta
            converged = np.max(np.abs(grad)) < self.tol

        if not converged:
            if lam == 0 and np.max(np.abs(beta[1:])) > 10:
                raise SeparationError(
                    "treatment groups appear separable; use penalty > 0"
                )
            raise ConvergenceError(
                f"IRLS did not converge in {self.max_iter} iterations"
            )

        self.coef_ = beta[1:] / sd
        self.intercept_ = float(beta[0] - np.sum(beta[1:] * mu / sd))
        self.standardized_coef_ = beta.copy()
        self.n_iter_ = n_iter
        self.objective_path_ = path
        self.n_features_in_ = p
        self._mu, self._sd = mu, sd
        return self

    def decision_function(self, X):
        """Linear predictor (logit of the propensity score)."""
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        beta = self.standardized_coef_
        return beta[0] + ((X - self._mu) / self._sd) @ beta[1:]

    def predict_proba(self, X):
        p1 = expit(self.decision_function(X))
        return np.column_stack([1 - p1, p1])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)


@dataclass(frozen=True)
class PropensityModel:
    """Fitted propensity model: intercept-first coefficients and unit logits."""

    coefficients: np.ndarray
    logits: np.ndarray
    penalty: float
    covariates: tuple = ()

    @property
    def scores(self) -> np.ndarray:
        return expit(self.logits)


def fit_propensity(ds: ObservationalDataset, matching_covariates, penalty=DEFAULT_PENALTY,
                   standardize=True, max_iter=100) -> PropensityModel:
    """Regress treatment on the matching covariates and return unit logits."""
    cols = ds.column_index(matching_covariates)
    if len(cols) < 1:
        raise ValueError("need at least one matching covariate")
    X = ds.X[:, cols]
    model = PenalizedLogisticRegression(penalty=penalty, standardize=standardize,
                                        max_iter=max_iter).fit(X, ds.Z)
    return PropensityModel(
        coefficients=np.concatenate([[model.intercept_], model.coef_]),
        logits=model.decision_function(X),
        penalty=float(penalty),
        covariates=tuple(ds.covariate_names[c] for c in cols),
    )
