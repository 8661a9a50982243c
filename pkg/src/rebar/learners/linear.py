"""Grand-mean and penalized linear learners (ridge, Bayesian LM, lasso)."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._cd import lasso_path_gram

__all__ = ["Zero", "GrandMean", "Ridge", "BayesLM", "Lasso", "kfold_indices"]


def kfold_indices(n: int, k: int, seed) -> list[np.ndarray]:
    """Seeded permutation of ``range(n)`` cut into ``k`` near-equal blocks."""
    if k < 2:
        raise ValueError("k_folds must be >= 2")
    if n < k:
        raise ValueError(f"cannot split {n} rows into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, k)


def _standardize(X, on: bool):
    mu = X.mean(axis=0)
    if on:
        sd = X.std(axis=0)
        sd[sd == 0] = 1.0
    else:
        sd = np.ones(X.shape[1])
    return (X - mu) / sd, mu, sd


class _LinearBase(RegressorMixin, BaseEstimator):
    def _set_coef(self, b_std, mu, sd, ybar):
        self.coef_ = b_std / sd
        self.intercept_ = float(ybar - np.sum(self.coef_ * mu))

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        return X @ self.coef_ + self.intercept_


class Zero(RegressorMixin, BaseEstimator):
    """Predict 0 everywhere (turns rebar into plain matching)."""

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "n_features_in_")
        return np.zeros(check_array(X, dtype=float).shape[0])


class GrandMean(RegressorMixin, BaseEstimator):
    """Predict the training mean everywhere."""

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        self.mean_ = float(np.mean(y))
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "mean_")
        X = check_array(X, dtype=float)
        return np.full(X.shape[0], self.mean_)


def _ridge_factors(s, alpha):
    keep = s > 1e-12 * (s[0] if s.size else 1.0)
    f = np.zeros_like(s)
    f[keep] = s[keep] / (s[keep] ** 2 + alpha)
    return f


class Ridge(_LinearBase):
    """L2-penalized least squares on standardized covariates.

    Minimizes ``||y - b0 - Xs b||^2 + alpha ||b||^2``. With ``alpha=None``
    the penalty is picked by k-fold CV over ``n * logspace(-4, 3, n_alphas)``.
    """

    def __init__(self, alpha=None, n_alphas=50, cv=5, standardize=True, random_state=0):
        self.alpha = alpha
        self.n_alphas = n_alphas
        self.cv = cv
        self.standardize = standardize
        self.random_state = random_state

    def _grid(self, n):
        return n * np.logspace(-4, 3, self.n_alphas)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        n = X.shape[0]
        self.n_features_in_ = X.shape[1]
        if self.alpha is None:
            alphas = self._grid(n)
            mse = np.zeros(alphas.size)
            for test in kfold_indices(n, self.cv, self.random_state):
                train = np.setdiff1d(np.arange(n), test)
                Xs, mu, sd = _standardize(X[train], self.standardize)
                ybar = y[train].mean()
                U, s, Vt = np.linalg.svd(Xs, full_matrices=False)
                A = ((X[test] - mu) / sd) @ Vt.T
                d = U.T @ (y[train] - ybar)
                preds = ybar + np.stack([A @ (_ridge_factors(s, a) * d) for a in alphas])
                mse += ((preds - y[test]) ** 2).sum(axis=1)
            self.cv_mse_path_ = mse / n
            self.heldout_mse_ = float(np.min(self.cv_mse_path_))
            self.alphas_ = alphas
            self.alpha_ = float(alphas[np.argmin(mse)])
        else:
            if self.alpha < 0:
                raise ValueError("alpha must be nonnegative")
            self.alpha_ = float(self.alpha)
        Xs, mu, sd = _standardize(X, self.standardize)
        ybar = y.mean()
        U, s, Vt = np.linalg.svd(Xs, full_matrices=False)
        b = Vt.T @ (_ridge_factors(s, self.alpha_) * (U.T @ (y - ybar)))
        self._set_coef(b, mu, sd, ybar)
        return self


class BayesLM(_LinearBase):
    """Linear model with independent Gaussian priors on standardized slopes.

    The prior SD is ``prior_scale * sd(y)``; the noise variance is
    re-estimated by fixed-point iteration and the posterior mean reported.
    When p approaches n the noise estimate collapses and the fit
    approaches least-squares interpolation.
    """

    def __init__(self, prior_scale=2.5, n_iter=50):
        self.prior_scale = prior_scale
        self.n_iter = n_iter

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        n = X.shape[0]
        self.n_features_in_ = X.shape[1]
        Xs, mu, sd = _standardize(X, True)
        ybar = y.mean()
        yc = y - ybar
        var_y = max(float(np.mean(yc**2)), 1e-300)
        tau2 = self.prior_scale**2 * var_y
        U, s, Vt = np.linalg.svd(Xs, full_matrices=False)
        d = U.T @ yc
        sigma2 = var_y
        for _ in range(self.n_iter):
            alpha = sigma2 / tau2
            b = Vt.T @ (_ridge_factors(s, alpha) * d)
            rss = float(np.sum((yc - Xs @ b) ** 2))
            new = max(rss / n, 1e-10 * var_y)
            if abs(new - sigma2) <= 1e-10 * sigma2:
                sigma2 = new
                break
            sigma2 = new
        self.alpha_ = sigma2 / tau2
        self.sigma2_ = sigma2
        b = Vt.T @ (_ridge_factors(s, self.alpha_) * d)
        self._set_coef(b, mu, sd, ybar)
        return self


class Lasso(_LinearBase):
    """L1-penalized least squares by cyclic coordinate descent.

    Minimizes ``1/(2n) ||y - b0 - Xs b||^2 + lambda |b|_1`` on standardized
    covariates. With ``alpha=None`` lambda is chosen by k-fold CV over a
    log-spaced path of ``n_alphas`` values from ``lambda_max`` down to
    ``eps * lambda_max``, where ``lambda_max = max_j |Xs_j'(y - ybar)| / n``
    is the smallest penalty that zeroes every slope.

    Attributes
    ----------
    coef_, intercept_ : coefficients on the original covariate scale
    alpha_ : float
        Penalty used for the final fit.
    lambda_max_ : float
    alphas_, cv_mse_path_ : ndarray
        Only set when lambda was chosen by CV.
    heldout_mse_ : float
        CV error at the chosen lambda (CV mode only).
    """

    def __init__(self, alpha=None, n_alphas=100, eps=1e-4, cv=5, standardize=True,
                 tol=1e-7, max_sweeps=100_000, early_stop=True, random_state=0):
        self.alpha = alpha
        self.n_alphas = n_alphas
        self.eps = eps
        self.cv = cv
        self.standardize = standardize
        self.tol = tol
        self.max_sweeps = max_sweeps
        self.early_stop = early_stop
        self.random_state = random_state

    def _path(self, X, y, lambdas, early_stop=False):
        Xs, mu, sd = _standardize(X, self.standardize)
        ybar = y.mean()
        yc = y - ybar
        n = X.shape[0]
        G = Xs.T @ Xs / n
        c = Xs.T @ yc / n
        fdev, devmax = (1e-5, 0.999) if early_stop else (-np.inf, np.inf)
        B, _ = lasso_path_gram(np.ascontiguousarray(G), c, float(yc @ yc / n),
                               np.asarray(lambdas, float), self.tol, self.max_sweeps,
                               fdev, devmax)
        return B, mu, sd, ybar

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        n = X.shape[0]
        self.n_features_in_ = X.shape[1]
        Xs, _, _ = _standardize(X, self.standardize)
        lam_max = float(np.max(np.abs(Xs.T @ (y - y.mean()))) / n) if X.shape[1] else 0.0
        self.lambda_max_ = lam_max
        if self.alpha is not None:
            if self.alpha < 0:
                raise ValueError("alpha must be nonnegative")
            self.alpha_ = float(self.alpha)
            lambdas = np.array([self.alpha_])
            if lam_max > self.alpha_:
                # warm-start from lambda_max for a stable descent
                lambdas = np.geomspace(lam_max, max(self.alpha_, 1e-300), 20) if self.alpha_ > 0 \
                    else np.concatenate([np.geomspace(lam_max, lam_max * 1e-6, 20), [0.0]])
                lambdas[-1] = self.alpha_
            B, mu, sd, ybar = self._path(X, y, lambdas)
            self._set_coef(B[-1], mu, sd, ybar)
            return self
        if lam_max == 0.0:
            self.alpha_ = 0.0
            self.alphas_ = np.zeros(1)
            self._set_coef(np.zeros(X.shape[1]), X.mean(axis=0), np.ones(X.shape[1]), y.mean())
            return self
        lambdas = np.geomspace(lam_max, lam_max * self.eps, self.n_alphas)
        mse = np.zeros(lambdas.size)
        for test in kfold_indices(n, self.cv, self.random_state):
            train = np.setdiff1d(np.arange(n), test)
            B, mu, sd, ybar = self._path(X[train], y[train], lambdas, self.early_stop)
            pred = ybar + ((X[test] - mu) / sd) @ B.T
            mse += ((pred - y[test][:, None]) ** 2).sum(axis=0)
        self.alphas_ = lambdas
        self.cv_mse_path_ = mse / n
        self.heldout_mse_ = float(np.min(self.cv_mse_path_))
        best = int(np.argmin(mse))
        self.alpha_ = float(lambdas[best])
        B, mu, sd, ybar = self._path(X, y, lambdas[: best + 1], self.early_stop)
        self._set_coef(B[-1], mu, sd, ybar)
        return self
