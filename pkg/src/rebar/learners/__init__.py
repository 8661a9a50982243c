"""Outcome learners fitted on the remnant and their super-learner ensemble."""

from .ensemble import (
    LEARNERS,
    CVResult,
    SuperLearner,
    cross_validate,
    fit_learner,
    fit_library,
    fit_with_heldout,
    learner_name,
    make_learner,
    register_learner,
    simplex_least_squares,
    super_learner,
)
from .forest import RandomForest
from .linear import BayesLM, GrandMean, Lasso, Ridge, Zero, kfold_indices

__all__ = [
    "LEARNERS",
    "BayesLM",
    "CVResult",
    "GrandMean",
    "Lasso",
    "RandomForest",
    "Ridge",
    "Zero",
    "SuperLearner",
    "cross_validate",
    "fit_learner",
    "fit_library",
    "fit_with_heldout",
    "kfold_indices",
    "learner_name",
    "make_learner",
    "register_learner",
    "simplex_least_squares",
    "super_learner",
]
