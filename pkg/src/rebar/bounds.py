"""Worst-case bias bounds for the rebar estimator given a prediction MSE."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .matching import MatchAssignment

__all__ = ["BiasBound", "bound_constant", "gamma_multiplier", "bias_bound", "matching_bias"]


@dataclass(frozen=True)
class BiasBound:
    """Bound on ``|bias|`` of the rebar estimator.

    ``bound_abs_bias = sqrt(mse_input * multiplier)``, where the multiplier is
    the design constant ``c_constant`` unless ``gamma`` was given (pairs only).
    ``bound_standardized`` is ``bound_abs_bias / sd_yc``.
    """

    c_constant: float
    multiplier: float
    mse_input: float
    bound_abs_bias: float
    gamma: float | None = None
    sd_yc: float | None = None
    bound_standardized: float | None = None
    label: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def bound_constant(m: MatchAssignment) -> float:
    """``C = (n / n_T^2) * sum_m (n_Cm + n_Tm) * max(1, n_Tm / n_Cm)^2``.

    ``n`` counts matched units only. All-pair designs give exactly 4.
    """
    nt = m.n_treated_per_set.astype(float)
    nc = m.n_control_per_set.astype(float)
    if m.is_pair_design:
        return 4.0
    n = float(np.sum(nt + nc))
    n_t = float(np.sum(nt))
    return n / n_t**2 * float(np.sum((nc + nt) * np.maximum(1.0, nt / nc) ** 2))


def gamma_multiplier(gamma: float) -> float:
    """``4 (sqrt(G) - 1) / (sqrt(G) + 1)``; 0 at ``G = 1``, tends to 4."""
    if not gamma >= 1:
        raise ValueError("gamma must be >= 1")
    if math.isinf(gamma):
        return 4.0
    r = math.sqrt(gamma)
    return 4.0 * (r - 1.0) / (r + 1.0)


def bias_bound(m: MatchAssignment, mse_m: float, sd_yc=None, gamma=None, label="") -> BiasBound:
    """Bound ``|bias|`` from the matched-sample prediction MSE.

    Parameters
    ----------
    m : MatchAssignment
    mse_m : float
        Mean squared prediction error of ``yhat`` for ``y_C`` over matched units
        (or an assumed value when ``y_C`` is unobservable).
    sd_yc : float, optional
        SD of ``y_C`` in the matched sample; adds the standardized bound.
    gamma : float, optional
        Bound on within-pair assignment odds ratios; only valid for pairs.
    """
    if not mse_m >= 0:
        raise ValueError("mse_m must be nonnegative")
    C = bound_constant(m)
    if gamma is not None:
        if not m.is_pair_design:
            raise ValueError("gamma bound is only available for pair designs")
        mult = gamma_multiplier(gamma)
    else:
        mult = C
    b = math.sqrt(mse_m * mult)
    std = None
    if sd_yc is not None:
        if not sd_yc > 0:
            raise ValueError("sd_yc must be positive")
        std = b / sd_yc
    return BiasBound(c_constant=C, multiplier=mult, mse_input=float(mse_m), bound_abs_bias=b,
                     gamma=None if gamma is None else float(gamma),
                     sd_yc=None if sd_yc is None else float(sd_yc),
                     bound_standardized=std, label=label)


def matching_bias(m: MatchAssignment, v, p) -> float:
    """Expected error of the matching estimator from non-random assignment.

    ``v`` holds a fixed per-unit quantity (``y_C`` for plain matching,
    ``y_C - yhat`` for rebar) and ``p[i]`` the probability that unit ``i``
    is the treated one given its set's counts, so ``p`` sums to ``n_Tm``
    within every set. Returns
    ``sum_m (n_Tm / n_T) * v_m' (p_m / n_Tm - (1 - p_m) / n_Cm)``.
    """
    if m.has_reuse:
        raise ValueError("needs a match without control reuse")
    v = np.asarray(v, dtype=float)
    p = np.asarray(p, dtype=float)
    u, s = m.units, m.set_ids
    nt = m.n_treated_per_set.astype(float)
    nc = m.n_control_per_set.astype(float)
    if np.any(p[u] < 0) or np.any(p[u] > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    if not np.allclose(np.bincount(s, weights=p[u], minlength=m.n_sets), nt, atol=1e-9):
        raise ValueError("probabilities must sum to n_Tm within every set")
    w = nt / nt.sum()
    q = w[s] * (p[u] / nt[s] - (1 - p[u]) / nc[s])
    return float(q @ v[u])
