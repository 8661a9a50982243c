"""Cross-validation and the CV-weighted super learner."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .forest import RandomForest
from .linear import BayesLM, GrandMean, Lasso, Ridge, Zero, kfold_indices

__all__ = [
    "LEARNERS",
    "make_learner",
    "learner_name",
    "register_learner",
    "fit_learner",
    "CVResult",
    "cross_validate",
    "simplex_least_squares",
    "SuperLearner",
    "super_learner",
    "fit_with_heldout",
    "fit_library",
]

LEARNERS = {
    "grand_mean": GrandMean,
    "ridge": Ridge,
    "lasso": Lasso,
    "bayes_lm": BayesLM,
    "random_forest": RandomForest,
    "zero": Zero,
}


def register_learner(name: str, factory) -> None:
    """Make ``factory(**params)`` available to :func:`make_learner` as ``name``."""
    LEARNERS[name] = factory


def make_learner(kind, **params):
    if not isinstance(kind, str):
        return clone(kind).set_params(**params) if params else clone(kind)
    try:
        return LEARNERS[kind](**params)
    except KeyError:
        raise ValueError(f"unknown learner {kind!r}; choose from {sorted(LEARNERS)}") from None


def learner_name(learner) -> str:
    if isinstance(learner, str):
        return learner
    for name, cls in LEARNERS.items():
        if type(learner) is cls:
            return name
    return type(learner).__name__


def _seeded(learner, seed):
    est = make_learner(learner)
    if seed is not None and "random_state" in est.get_params():
        est.set_params(random_state=int(seed))
    return est


def fit_learner(learner, X, y, seed=0):
    """Fit a fresh copy of ``learner`` with its randomness pinned to ``seed``."""
    X, y = check_X_y(X, y, dtype=float, y_numeric=True)
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    return _seeded(learner, seed).fit(X, y)


@dataclass
class CVResult:
    """Held-out performance of one learner."""

    mse: float
    r2: float
    fold_mse: list
    predictions: np.ndarray = field(repr=False)

    @property
    def rmse(self) -> float:
        return float(np.sqrt(self.mse))


def _r2(mse, y):
    var = float(np.var(y))
    if var == 0:
        return 0.0 if mse == 0 else -np.inf
    return 1.0 - mse / var


def _heldout(learner, X, y, folds, seed):
    pred = np.empty(y.shape[0])
    fold_mse = []
    for test in folds:
        train = np.setdiff1d(np.arange(y.shape[0]), test)
        model = _seeded(learner, seed).fit(X[train], y[train])
        pred[test] = model.predict(X[test])
        fold_mse.append(float(np.mean((pred[test] - y[test]) ** 2)))
    return pred, fold_mse


def cross_validate(learner, X, y, k_folds=5, seed=0) -> CVResult:
    """k-fold CV: MSE over all held-out rows and ``R^2 = 1 - MSE / Var(y)``."""
    X, y = check_X_y(X, y, dtype=float, y_numeric=True)
    folds = kfold_indices(y.shape[0], k_folds, seed)
    pred, fold_mse = _heldout(learner, X, y, folds, seed)
    mse = float(np.mean((pred - y) ** 2))
    return CVResult(mse=mse, r2=_r2(mse, y), fold_mse=fold_mse, predictions=pred)


def simplex_least_squares(P, y):
    """Weights on the probability simplex minimizing ``mean((y - P w)^2)``.

    Exact for small libraries: every support is tried with the
    sum-to-one constraint active and the best nonnegative solution kept.
    """
    P = np.asarray(P, dtype=float)
    y = np.asarray(y, dtype=float)
    L = P.shape[1]
    if L == 1:
        return np.ones(1)
    if L > 12:
        return _simplex_pg(P, y)
    best_w, best_obj = None, np.inf
    for size in range(1, L + 1):
        for support in itertools.combinations(range(L), size):
            S = list(support)
            Ps = P[:, S]
            k = len(S)
            if k == 1:
                sol = np.ones(1)
                obj = float(np.mean((y - Ps[:, 0]) ** 2))
                if obj < best_obj:
                    best_obj, best_w = obj, np.zeros(L)
                    best_w[S] = 1.0
                continue
            kkt = np.zeros((k + 1, k + 1))
            kkt[:k, :k] = 2 * Ps.T @ Ps
            kkt[:k, k] = 1.0
            kkt[k, :k] = 1.0
            rhs = np.concatenate([2 * Ps.T @ y, [1.0]])
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:k]
            if np.any(sol < -1e-10) or abs(sol.sum() - 1) > 1e-6:
                continue
            sol = np.clip(sol, 0, None)
            sol /= sol.sum()
            obj = float(np.mean((y - Ps @ sol) ** 2))
            if obj < best_obj - 1e-15 * max(1.0, abs(best_obj)):
                best_obj = obj
                best_w = np.zeros(L)
                best_w[S] = sol
    return best_w


def _project_simplex(v):
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1
    rho = np.nonzero(u * np.arange(1, v.size + 1) > css)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1.0), 0)


def _simplex_pg(P, y, n_iter=5000):
    n, L = P.shape
    H = P.T @ P / n
    g0 = P.T @ y / n
    step = 1.0 / max(np.linalg.eigvalsh(H)[-1], 1e-300)
    w = np.full(L, 1.0 / L)
    v, t = w.copy(), 1.0
    for _ in range(n_iter):
        w_new = _project_simplex(v - step * (H @ v - g0))
        t_new = (1 + np.sqrt(1 + 4 * t * t)) / 2
        v = w_new + (t - 1) / t_new * (w_new - w)
        w, t = w_new, t_new
    objs = [np.mean((y - P @ w) ** 2)] + [np.mean((y - P[:, j]) ** 2) for j in range(L)]
    best = int(np.argmin(objs))
    if best == 0:
        return w
    out = np.zeros(L)
    out[best - 1] = 1.0
    return out


class SuperLearner(RegressorMixin, BaseEstimator):
    """Convex combination of learners weighted by cross-validated MSE.

    Parameters
    ----------
    library : list
        Learner names (see :data:`LEARNERS`) or estimator instances.
    k_folds : int, default=5
    random_state : int, default=0
        Seeds the fold split and every member's own randomness.
    refit_all : bool, default=False
        Refit zero-weight members on the full data too.

    Attributes
    ----------
    weights_ : ndarray
        Simplex weights, one per library member.
    members_ : list
        Members refit on all rows (``None`` for skipped zero-weight ones).
    cv_table_ : list of dict
        Per-member CV RMSE, R^2 and weight.
    cv_predictions_ : ndarray of shape (n, len(library))
    """

    def __init__(self, library=("lasso", "random_forest"), k_folds=5, random_state=0,
                 refit_all=False):
        self.library = library
        self.k_folds = k_folds
        self.random_state = random_state
        self.refit_all = refit_all

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        library = list(self.library)
        if not library:
            raise ValueError("library must be nonempty")
        n = y.shape[0]
        folds = kfold_indices(n, self.k_folds, self.random_state)
        seeds = np.random.SeedSequence(self.random_state).generate_state(len(library))
        P = np.empty((n, len(library)))
        table = []
        for j, learner in enumerate(library):
            P[:, j], _ = _heldout(learner, X, y, folds, seeds[j])
            mse = float(np.mean((P[:, j] - y) ** 2))
            table.append({"learner": learner_name(learner), "rmse": float(np.sqrt(mse)),
                          "r2": _r2(mse, y)})
        w = simplex_least_squares(P, y)
        for row, wj in zip(table, w):
            row["weight"] = float(wj)
        self.members_ = [
            _seeded(learner, seeds[j]).fit(X, y) if (w[j] > 0 or self.refit_all) else None
            for j, learner in enumerate(library)
        ]
        self.weights_ = w
        self.cv_predictions_ = P
        self.cv_table_ = table
        self.cv_mse_ = float(np.mean((P @ w - y) ** 2))
        self.cv_r2_ = _r2(self.cv_mse_, y)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=float)
        out = np.zeros(X.shape[0])
        for w, model in zip(self.weights_, self.members_):
            if w > 0:
                out += w * model.predict(X)
        return out

    def summary(self) -> dict:
        """JSON-ready weights and CV table."""
        check_is_fitted(self, "weights_")
        return {"k_folds": self.k_folds, "seed": self.random_state,
                "cv_mse": self.cv_mse_, "cv_r2": self.cv_r2_, "members": self.cv_table_}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


def fit_with_heldout(learner, X, y, k_folds=5, seed=0):
    """Fit ``learner`` and estimate its held-out MSE as cheaply as possible.

    Learners that already compute an internal held-out error
    (``heldout_mse_``: CV error at the tuned penalty, or out-of-bag error)
    reuse it; others are cross-validated.

    Returns ``(model, mse, r2)``.
    """
    X, y = check_X_y(X, y, dtype=float, y_numeric=True)
    model = _seeded(learner, seed).fit(X, y)
    mse = getattr(model, "heldout_mse_", None)
    if mse is None or not np.isfinite(mse):
        mse = cross_validate(learner, X, y, k_folds, seed).mse
    return model, float(mse), _r2(mse, y)


def fit_library(library, X, y, k_folds=5, seed=0):
    """Super learner over ``library``, or the lone member when it has one.

    Returns ``(model, cv_mse, cv_r2)``.
    """
    library = list(library)
    if len(library) == 1:
        return fit_with_heldout(library[0], X, y, k_folds, seed)
    sl = SuperLearner(library, k_folds=k_folds, random_state=seed).fit(X, y)
    return sl, sl.cv_mse_, sl.cv_r2_


def super_learner(library, X, y, k_folds=5, seed=0) -> SuperLearner:
    return SuperLearner(library=library, k_folds=k_folds, random_state=seed).fit(X, y)
