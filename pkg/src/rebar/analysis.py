"""End-to-end matched analysis with remnant-based residualization.

:class:`RebarAnalysis` runs the workflow in a fixed order: match on the
design data only, freeze the match, fit the outcome model on the remnant,
run diagnostics, then unlock the matched-sample outcomes for estimation.
Outcomes live in an :class:`~rebar.data.OutcomeBox` whose access log is
checked after every stage.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .bounds import bias_bound
from .data import LeakageError, ObservationalDataset, OutcomeBox
from .diagnostics import augment_with_score, balance_report, proximal_validation, yhat_balance
from .estimators import (
    EstimateReport,
    RemnantPrediction,
    format_table,
    matching_estimator,
    regression_estimator,
)
from .inference import PermutationPlan, permutation_ci, permutation_test
from .learners import fit_library, learner_name
from .matching import (
    MatchSpec,
    coarsened_exact_match,
    effective_sample_size,
    nearest_neighbor_match,
    optimal_match,
    relax_match,
)
from .propensity import DEFAULT_PENALTY, fit_propensity

__all__ = ["RebarAnalysis", "EmptyRemnantError"]

METHODS = ("psm", "nn", "cem")


class EmptyRemnantError(ValueError):
    """Every control was matched, leaving nothing to train the outcome model."""


def _guard(box: OutcomeBox, stage: str, allowed: np.ndarray) -> None:
    extra = box.touched(stage) - set(allowed.tolist())
    if extra:
        raise LeakageError(f"stage {stage!r} read outcomes of {len(extra)} matched-sample units")


class RebarAnalysis(BaseEstimator):
    """Matching analysis reinforced with remnant-trained predictions.

    Parameters
    ----------
    match_covariates : list of str or int
        Columns used for the propensity model (``psm``, ``nn``) or for
        coarsening (``cem``).
    method : {"psm", "nn", "cem"}
    max_controls : int
        Control cap per treated unit for ``psm`` (1 gives pair matching).
    caliper : float, optional
        Logit caliper for ``psm``.
    bins : int
        Bins per covariate for ``cem``.
    learners : sequence
        Outcome-model library; a single entry skips the ensemble layer.
    folds : int
    n_perms : int or "exact"
    relax_max_controls : int, optional
        Control cap of the relaxed match used for proximal validation
        (``psm`` only).
    level : float
        Confidence level of the permutation intervals.
    interact_propensity : bool
        Give the outcome model the propensity score and its interactions
        with every covariate as extra features.
    assumed_mse : sequence of float, optional
        Matched-sample MSE values for the assumption-based bias bounds;
        by default anchored at the cross-validated and proximal MSE.
    gamma : sequence of float
        Assignment odds bounds for the pair-design bounds.
    random_state : int

    Attributes
    ----------
    propensity_, match_, balance_, yhat_balance_, learner_, prediction_,
    cv_mse_, cv_r2_, proximal_, reports_, bounds_
    """

    def __init__(self, match_covariates=None, method="psm", max_controls=1, caliper=None,
                 bins=5, learners=("lasso", "random_forest"), folds=5, n_perms=999,
                 relax_max_controls=None, level=0.95, interact_propensity=False,
                 assumed_mse=None, gamma=(1.5, 3.0, 6.0), propensity_penalty=DEFAULT_PENALTY,
                 flag_ratio=1.25, random_state=0):
        self.match_covariates = match_covariates
        self.method = method
        self.max_controls = max_controls
        self.caliper = caliper
        self.bins = bins
        self.learners = learners
        self.folds = folds
        self.n_perms = n_perms
        self.relax_max_controls = relax_max_controls
        self.level = level
        self.interact_propensity = interact_propensity
        self.assumed_mse = assumed_mse
        self.gamma = gamma
        self.propensity_penalty = propensity_penalty
        self.flag_ratio = flag_ratio
        self.random_state = random_state

    def _spec(self):
        if self.max_controls == 1:
            return MatchSpec("optimal_pair", caliper=self.caliper)
        return MatchSpec("optimal_ratio", max_controls_per_treated=int(self.max_controls),
                         caliper=self.caliper)

    def fit(self, X, z, y, covariate_names=None, unit_ids=None, predictions=None):
        """Run the full workflow.

        Parameters
        ----------
        X, z, y : array-like
            Covariates, treatment and outcome.
        predictions : RemnantPrediction, optional
            Externally fitted ``yhat`` with its training rows; replaces the
            internal learner fit and is checked for leakage.
        """
        ds = ObservationalDataset(X=X, Z=z, Y=y, covariate_names=covariate_names or (),
                                  unit_ids=unit_ids or ())
        return self.fit_dataset(ds, predictions=predictions)

    def fit_dataset(self, ds: ObservationalDataset, predictions=None):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        seed = int(self.random_state)
        box = OutcomeBox(ds.Y)
        # design stage sees no outcomes at all
        design = ObservationalDataset(X=ds.X, Z=ds.Z, Y=np.zeros(ds.n),
                                      covariate_names=ds.covariate_names, unit_ids=ds.unit_ids)
        cov = self.match_covariates if self.match_covariates is not None else list(range(ds.p))
        cols = design.column_index(cov)
        Z = ds.Z
        logits = None
        if self.method in ("psm", "nn"):
            self.propensity_ = fit_propensity(design, cols, penalty=self.propensity_penalty)
            logits = self.propensity_.logits
        else:
            self.propensity_ = None
        if self.method == "psm":
            m = optimal_match(logits, Z, self._spec())
        elif self.method == "nn":
            m = nearest_neighbor_match(logits, Z)
        else:
            m = coarsened_exact_match(ds.X[:, cols], Z, self.bins)
        if m.n_sets == 0:
            raise ValueError("the match is empty")
        self.match_ = m
        self.balance_ = balance_report(design, cols, m, n_perms=_perm_count(self.n_perms),
                                       seed=seed)

        # outcome model on the remnant
        remnant = m.remnant()
        if remnant.size == 0:
            raise EmptyRemnantError("the remnant is empty; no controls left to train on")
        features = ds.X if not (self.interact_propensity and logits is not None) \
            else augment_with_score(ds.X, logits)
        box.unlock("learner")
        if predictions is None:
            y_rem = box.take(remnant)
            model, self.cv_mse_, self.cv_r2_ = fit_library(self.learners, features[remnant],
                                                           y_rem, self.folds, seed)
            self.learner_ = model
            self.prediction_ = RemnantPrediction(model.predict(features), remnant,
                                                 ",".join(learner_name(x) for x in self.learners))
        else:
            self.learner_ = None
            self.prediction_ = predictions
            pr = np.asarray(predictions.train_index)
            if pr.size:
                # in-sample error on the declared training rows
                y_tr = box.take(pr)
                self.cv_mse_ = float(np.mean((y_tr - predictions.values[pr]) ** 2))
                var = float(np.var(y_tr))
                self.cv_r2_ = 1 - self.cv_mse_ / var if var > 0 else 0.0
            else:
                self.cv_mse_ = self.cv_r2_ = float("nan")
        self.prediction_.check_against(m)
        _guard(box, "learner", remnant)

        # diagnostics
        box.set_stage("diagnostics")
        yhat = self.prediction_.values
        self.yhat_balance_ = yhat_balance(Z, m, yhat, n_perms=_perm_count(self.n_perms), seed=seed)
        self.proximal_ = None
        if self.relax_max_controls is not None:
            if self.method != "psm":
                raise ValueError("proximal validation needs method='psm'")
            relaxed = MatchSpec("optimal_ratio",
                                max_controls_per_treated=int(self.relax_max_controls),
                                caliper=self.caliper)
            m0, m_big = relax_match(logits, Z, self._spec(), relaxed)
            self.proximal_ = proximal_validation(
                ObservationalDataset(X=features, Z=Z, Y=np.zeros(ds.n)), m0, m_big,
                self.learners, self.folds, seed, box=box, flag_ratio=self.flag_ratio,
                reference=(self.cv_mse_, self.cv_r2_) if predictions is None else None)
        _guard(box, "diagnostics", remnant)

        # estimation
        box.set_stage("estimation")
        Y = box.take_all()
        e = Y - yhat
        plan = PermutationPlan(n_perms=self.n_perms, seed=seed)
        common = {"estimand_changed": bool(m.estimand_changed),
                  "n_dropped_treated": int(m.dropped_treated.size),
                  "effective_sample_size": effective_sample_size(m)}
        self.reports_ = [self._report("Matching", Y, Z, m, plan, common),
                         self._report("Rebar", e, Z, m, plan, common)]
        self.bounds_ = self._bounds(m)
        self.reports_[1].diagnostics["bias_bounds"] = [b.to_dict() for b in self.bounds_]
        return self

    def _report(self, name, v, Z, m, plan, common):
        point = matching_estimator(v, Z, m)
        _, se = regression_estimator(v, Z, m)
        diag = dict(common)
        if m.has_reuse:
            diag["note"] = "no within-set permutation inference for matches with reuse"
            return EstimateReport(method=name, point=point, se=se, diagnostics=diag)
        p = permutation_test(None, v, Z, m, plan)
        ci = permutation_ci(None, v, Z, m, plan, level=self.level)
        return EstimateReport(method=name, point=point, se=se, p_value=p, ci=ci,
                              diagnostics=diag)

    def _bounds(self, m):
        if self.assumed_mse is not None:
            grid = [float(v) for v in self.assumed_mse]
        else:
            grid = [v for v in (self.cv_mse_,
                                None if self.proximal_ is None else self.proximal_.pv_mse)
                    if v is not None and np.isfinite(v)]
            if not grid:  # nothing to anchor on; pass assumed_mse to get bounds
                return []
            grid.append(2 * max(grid))
        out = [bias_bound(m, v, label="assumption-based") for v in grid]
        if m.is_pair_design:
            out += [bias_bound(m, v, gamma=g, label="assumption-based") for v in grid
                    for g in self.gamma]
        return out

    def summary_table(self) -> str:
        check_is_fitted(self, "reports_")
        return format_table(self.reports_)

    def to_dict(self) -> dict:
        check_is_fitted(self, "reports_")
        m = self.match_
        out = {
            "method": self.method,
            "match": {"n_sets": m.n_sets, "n_matched_treated": m.n_treated,
                      "n_matched_controls": int(np.unique(m.units[m.z[m.units] == 0]).size),
                      "n_remnant": int(m.remnant().size),
                      "effective_sample_size": effective_sample_size(m),
                      "estimand_changed": bool(m.estimand_changed)},
            "balance": self.balance_.to_dict(),
            "yhat_balance": {"std_diff": self.yhat_balance_[0], "p_value": self.yhat_balance_[1]},
            "learner": {"cv_mse": self.cv_mse_, "cv_r2": self.cv_r2_,
                        "summary": _learner_summary(self.learner_)},
            "proximal_validation": None if self.proximal_ is None else self.proximal_.to_dict(),
            "estimates": [r.to_dict() for r in self.reports_],
        }
        return out


def _perm_count(n_perms):
    return 999 if n_perms == "exact" else max(int(n_perms), 100)


def _learner_summary(model):
    if model is None:
        return {"external_predictions": True}
    if hasattr(model, "summary"):
        return model.summary()
    return {"learner": learner_name(model), "params": {k: v for k, v in model.get_params().items()
                                                     if isinstance(v, (int, float, str, type(None)))}}
