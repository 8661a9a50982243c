"""Matching, rebar and covariate-adjusted effect-on-the-treated estimators."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import LeakageError
from .matching import MatchAssignment

__all__ = [
    "RankDeficiencyWarning",
    "RemnantPrediction",
    "PotentialResidualView",
    "EstimateReport",
    "residualize",
    "matching_estimator",
    "matching_weights",
    "rebar_estimator",
    "nn_att_estimator",
    "regression_estimator",
    "format_table",
]


class RankDeficiencyWarning(UserWarning):
    """A least-squares design was singular and a tiny ridge penalty was used."""


@dataclass(frozen=True, eq=False)
class RemnantPrediction:
    """Predictions ``yhat_C(x_i)`` for every unit, tagged with the rows the
    model was trained on."""

    values: np.ndarray
    train_index: np.ndarray
    learner: str = ""

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float).ravel())
        object.__setattr__(self, "train_index", np.asarray(self.train_index, dtype=np.int64).ravel())

    def check_against(self, m: MatchAssignment) -> None:
        overlap = np.intersect1d(self.train_index, m.matched_units())
        if overlap.size:
            raise LeakageError(
                f"outcome model was trained on {overlap.size} matched-sample units "
                f"(e.g. {overlap[:5].tolist()})"
            )


@dataclass(frozen=True, eq=False)
class PotentialResidualView:
    """Predictions and residuals ``e = Y - yhat``."""

    yhat: np.ndarray
    e: np.ndarray


def residualize(Y, yhat) -> PotentialResidualView:
    Y = np.asarray(Y, dtype=float)
    yhat = np.asarray(getattr(yhat, "values", yhat), dtype=float)
    return PotentialResidualView(yhat=yhat, e=Y - yhat)


def _set_counts(Z, m: MatchAssignment):
    zt = np.asarray(Z)[m.units]
    nt = np.bincount(m.set_ids, weights=zt, minlength=m.n_sets)
    nc = np.bincount(m.set_ids, weights=1 - zt, minlength=m.n_sets)
    return zt, nt, nc


def matching_weights(Z, m: MatchAssignment) -> np.ndarray:
    """Per-membership coefficients ``c`` with ``matching_estimator = c @ Y[units]``."""
    zt, nt, nc = _set_counts(Z, m)
    if np.any(nt < 1) or np.any(nc < 1):
        raise ValueError("every matched set needs treated and control units")
    n_t = nt.sum()
    s = m.set_ids
    return zt / n_t - (1 - zt) * (nt[s] / (n_t * nc[s]))


def matching_estimator(Y, Z, m: MatchAssignment) -> float:
    """Weighted average of within-set treated-minus-control mean differences,
    with set weights ``n_Tm / n_T``."""
    if m.n_sets == 0:
        raise ValueError("empty match")
    Y = np.asarray(Y, dtype=float)
    v = Y[m.units]
    # center on each set's first member so constant outcomes give exactly 0
    first = np.zeros(m.n_sets, dtype=np.int64)
    first[m.set_ids[::-1]] = np.arange(v.size)[::-1]
    return float(matching_weights(Z, m) @ (v - v[first][m.set_ids]))


def rebar_estimator(Y, Z, m: MatchAssignment, yhat, allow_untracked=False, check=True) -> float:
    """Matching estimator applied to residuals ``Y - yhat``.

    ``yhat`` must be a :class:`RemnantPrediction` whose training rows avoid
    the matched sample; pass ``allow_untracked=True`` to accept a bare array.
    The result is checked against ``tau_M(Y) - tau_M(yhat)``.
    """
    if isinstance(yhat, RemnantPrediction):
        yhat.check_against(m)
        values = yhat.values
    elif allow_untracked:
        values = np.asarray(yhat, dtype=float)
    else:
        raise LeakageError("predictions carry no training-row provenance; wrap them in "
                           "RemnantPrediction or pass allow_untracked=True")
    Y = np.asarray(Y, dtype=float)
    est = matching_estimator(Y - values, Z, m)
    if check:
        a, b = matching_estimator(Y, Z, m), matching_estimator(values, Z, m)
        if abs(est - (a - b)) > 1e-10 * max(1.0, abs(a), abs(b)):
            raise ArithmeticError("rebar decomposition identity violated")
    return est


def _wls(D, y, w):
    """Weighted least squares; falls back to a tiny ridge penalty when singular."""
    sw = np.sqrt(w)
    Dw = D * sw[:, None]
    yw = y * sw
    gram = Dw.T @ Dw
    flagged = False
    if np.linalg.matrix_rank(Dw) < D.shape[1]:
        flagged = True
        warnings.warn("singular least-squares design; using a tiny ridge penalty",
                      RankDeficiencyWarning, stacklevel=3)
        gram = gram + 1e-8 * max(np.trace(gram), 1.0) / D.shape[1] * np.eye(D.shape[1])
    bread = np.linalg.inv(gram)
    coef = bread @ (Dw.T @ yw)
    return coef, bread, Dw, yw, flagged


def nn_att_estimator(Y, Z, nn_match: MatchAssignment, adjust=False, X_match=None) -> float:
    """Nearest-neighbor effect on the treated, optionally bias-corrected.

    Unadjusted: mean over treated of ``Y_i`` minus the mean of its matched
    controls (reused controls count once per use). Adjusted: an OLS fit of
    ``Y`` on ``X_match`` among matched controls, weighted by reuse count,
    supplies ``mu(x)``, and each difference is corrected by
    ``mu(x_i) - mu(x_j)``.
    """
    Y = np.asarray(Y, dtype=float)
    if not adjust:
        return matching_estimator(Y, Z, nn_match)
    if X_match is None:
        raise ValueError("adjusted estimator needs X_match")
    X_match = np.asarray(X_match, dtype=float)
    if X_match.ndim == 1:
        X_match = X_match[:, None]
    Z = np.asarray(Z)
    mult = np.bincount(nn_match.units[Z[nn_match.units] == 0], minlength=Y.shape[0])
    controls = np.flatnonzero(mult > 0)
    D = np.column_stack([np.ones(controls.size), X_match[controls]])
    coef, *_ = _wls(D, Y[controls], mult[controls].astype(float))
    mu = coef[0] + X_match @ coef[1:]
    return matching_estimator(Y - mu, Z, nn_match)


def regression_estimator(Y, Z, m: MatchAssignment, X_match=None):
    """Coefficient on treatment from weighted least squares in the matched sample.

    Regresses the outcome on an intercept, ``X_match`` and ``Z`` over
    matched-set memberships. Treated rows get weight 1 and controls in set
    ``m`` weight ``n_Tm / n_Cm``, so with no covariates the coefficient
    equals :func:`matching_estimator`.

    Returns
    -------
    (coef, se) : HC3 sandwich standard error with ``r_i^2 / (1 - h_ii)^2``.
    """
    Y = np.asarray(Y, dtype=float)
    Z = np.asarray(Z)
    zt, nt, nc = _set_counts(Z, m)
    u = m.units
    w = np.where(zt == 1, 1.0, nt[m.set_ids] / nc[m.set_ids])
    cols = [np.ones(u.size)]
    if X_match is not None:
        X_match = np.asarray(X_match, dtype=float)
        if X_match.ndim == 1:
            X_match = X_match[:, None]
        cols.extend(X_match[u].T)
    cols.append(zt.astype(float))
    D = np.column_stack(cols)
    coef, bread, Dw, yw, _ = _wls(D, Y[u], w)
    resid = yw - Dw @ coef
    h = np.einsum("ij,jk,ik->i", Dw, bread, Dw)
    # a leverage-one row is fit exactly; its residual is roundoff
    exact = (resid == 0) | (h > 1 - 1e-10)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(exact, 0.0, resid**2 / (1 - h) ** 2)
    meat = (Dw * scale[:, None]).T @ Dw
    cov = bread @ meat @ bread
    return float(coef[-1]), float(np.sqrt(max(cov[-1, -1], 0.0)))


@dataclass
class EstimateReport:
    """Point estimate with optional SE, permutation p-value, CI and diagnostics."""

    method: str
    point: float
    se: float | None = None
    p_value: float | None = None
    ci: tuple | None = None
    estimand: str = "ETT"
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ci is not None:
            lo, hi = self.ci
            tol = 1e-9 * max(1.0, abs(self.point))
            if not lo - tol <= self.point <= hi + tol:
                raise ValueError(f"CI ({lo}, {hi}) does not contain point {self.point}")
            self.ci = (float(lo), float(hi))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), default=_jsonable, **kw)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "__dict__"):
        return o.__dict__
    raise TypeError(f"cannot serialize {type(o).__name__}")


def format_table(reports, digits=2) -> str:
    """Aligned text table: Estimate, SE, p-value, 95% CI per method."""
    def f(x, d=digits):
        return "" if x is None else f"{x:.{d}f}"

    header = ["", "Estimate", "SE", "p-value", "95% CI"]
    rows = []
    for r in reports:
        ci = "" if r.ci is None else f"({r.ci[0]:.1f},{r.ci[1]:.1f})"
        rows.append([r.method, f(r.point), f(r.se), f(r.p_value), ci])
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(x).rjust(wd) if i else str(x).ljust(wd)
                       for i, (x, wd) in enumerate(zip(row, widths)))
             for row in [header] + rows]
    return "\n".join(lines)
