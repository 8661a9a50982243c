"""Remnant-based residualization (rebar) for matched observational studies."""

__version__ = "0.1.0"

from .bounds import BiasBound, bias_bound, bound_constant, gamma_multiplier, matching_bias  # noqa: E402
from .data import (  # noqa: E402
    DataValidationError,
    DatasetSchema,
    LeakageError,
    ObservationalDataset,
    OutcomeBox,
    load_dataset,
    split_remnant,
    write_dataset,
)
from .estimators import (  # noqa: E402
    EstimateReport,
    RemnantPrediction,
    matching_estimator,
    nn_att_estimator,
    rebar_estimator,
    regression_estimator,
    residualize,
)
from .inference import PermutationPlan, permutation_ci, permutation_test  # noqa: E402
from .matching import (  # noqa: E402
    InfeasibleMatchError,
    MatchAssignment,
    MatchSpec,
    coarsened_exact_match,
    effective_sample_size,
    nearest_neighbor_match,
    optimal_match,
    relax_match,
)
from .propensity import PropensityModel, fit_propensity  # noqa: E402

__all__ = [
    "BiasBound", "bias_bound", "bound_constant", "gamma_multiplier", "matching_bias",
    "DataValidationError", "DatasetSchema", "LeakageError", "ObservationalDataset",
    "OutcomeBox", "load_dataset", "split_remnant", "write_dataset",
    "EstimateReport", "RemnantPrediction", "matching_estimator", "nn_att_estimator",
    "rebar_estimator", "regression_estimator", "residualize",
    "PermutationPlan", "permutation_ci", "permutation_test",
    "InfeasibleMatchError", "MatchAssignment", "MatchSpec", "coarsened_exact_match",
    "effective_sample_size", "nearest_neighbor_match", "optimal_match", "relax_match",
    "PropensityModel", "fit_propensity",
]
