"""Regression forest learner."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.ensemble import RandomForestRegressor
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

__all__ = ["RandomForest"]


class RandomForest(RegressorMixin, BaseEstimator):
    """Bootstrap regression forest with variance-reduction splits.

    Defaults follow the usual regression-forest conventions: 500 trees,
    ``mtry = max(1, p // 3)`` candidate features per split and a minimum
    leaf size of 5. Trees are grown by scikit-learn; results depend only on
    ``random_state``, never on ``n_jobs``.

    Attributes
    ----------
    heldout_mse_ : float
        Out-of-bag mean squared error (rows never out of bag are skipped).
    """

    def __init__(self, n_trees=500, mtry=None, min_leaf=5, random_state=0, n_jobs=None):
        self.n_trees = n_trees
        self.mtry = mtry
        self.min_leaf = min_leaf
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        p = X.shape[1]
        mtry = max(1, p // 3) if self.mtry is None else int(self.mtry)
        self.forest_ = RandomForestRegressor(
            n_estimators=self.n_trees,
            max_features=min(mtry, p),
            min_samples_leaf=self.min_leaf,
            bootstrap=True,
            random_state=self.random_state,
            n_jobs=self.n_jobs,
            oob_score=True,
        ).fit(X, y)
        oob = self.forest_.oob_prediction_
        seen = np.isfinite(oob)
        self.heldout_mse_ = float(np.mean((oob[seen] - y[seen]) ** 2)) if seen.any() else np.nan
        self.n_features_in_ = p
        return self

    def predict(self, X):
        check_is_fitted(self, "forest_")
        return self.forest_.predict(check_array(X, dtype=float))
