"""Monte-Carlo study of matching and rebar estimators on synthetic data.

Two data-generating scenarios are provided. In the *linear* scenario the
control outcome is ``1'x[:5] + beta'x[5:] + eps`` and treatment follows a
logistic model whose dependence on ``beta'x[5:]`` is scaled by ``kappa``.
In the *nonlinear* scenario only the ``2 n_T`` units with the largest
treatment index can be treated, and their outcome slope is reversed.
The true effect is zero everywhere.
"""

from __future__ import annotations

import dataclasses
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit

from . import __version__
from .bounds import bound_constant
from .data import ObservationalDataset
from .diagnostics import proximal_validation
from .estimators import (
    RankDeficiencyWarning,
    RemnantPrediction,
    matching_estimator,
    nn_att_estimator,
    rebar_estimator,
    regression_estimator,
)
from .learners import fit_library
from .learners.forest import RandomForest
from .matching import (
    MatchSpec,
    coarsened_exact_match,
    nearest_neighbor_match,
    optimal_match,
    relax_match,
)
from .propensity import fit_propensity

__all__ = [
    "SimConfigError",
    "SimConfig",
    "SimCell",
    "SimTruth",
    "gen_covariance",
    "gen_linear",
    "gen_nonlinear",
    "run_replication",
    "run_study",
    "summarize",
    "LINEAR_ESTIMATORS",
    "NONLINEAR_ESTIMATORS",
]

LINEAR_ESTIMATORS = (
    "psm:matching", "psm:rebar",
    "nn:matching", "nn:rebar", "nn:adjusted", "nn:adjusted_rebar",
    "cem:matching", "cem:adjusted", "cem:adjusted_rebar",
)
NONLINEAR_ESTIMATORS = ("psm:matching", "psm:rebar_lasso", "psm:rebar_random_forest")


class SimConfigError(ValueError):
    """Invalid simulation setting; ``field`` names the offending entry."""

    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class SimCell:
    n: int
    p: int
    target_n_t: int
    kappa: float
    rho: float
    beta_rate: float = 5.0
    n_match: int = 5


@dataclass(frozen=True)
class SimConfig:
    """Settings for :func:`run_study`.

    ``kappa`` and ``rho`` are grids; every combination is a cell with
    ``n_runs`` replications. ``learners`` is the super-learner library of
    the linear scenario; the nonlinear scenario always compares a lasso
    and a random forest separately.
    """

    n: int = 400
    p: int = 200
    target_n_t: int = 50
    kappa: tuple = (0.0, 0.5)
    rho: tuple = (0.0, 0.05)
    beta_rate: float = 5.0
    n_runs: int = 100
    scenario: str = "linear"
    seed: int = 20240101
    estimator_set: tuple | None = None
    learners: tuple = ("lasso",)
    k_folds: int = 5
    rf_trees: int = 100
    cem_bins: int = 5
    n_match: int = 5
    relax_max_controls: int = 2
    pv_flag_ratio: float = 1.25
    threads: int = 1

    def __post_init__(self):
        for name in ("kappa", "rho", "learners"):
            v = getattr(self, name)
            v = (v,) if isinstance(v, (int, float, str)) else tuple(v)
            object.__setattr__(self, name, v)
        if self.estimator_set is not None:
            object.__setattr__(self, "estimator_set", tuple(self.estimator_set))
        for name in ("n", "p", "target_n_t", "n_runs", "k_folds", "rf_trees", "cem_bins",
                     "n_match", "relax_max_controls", "threads"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise SimConfigError(name, f"must be a positive integer, got {v!r}")
        if self.p <= self.n_match:
            raise SimConfigError("p", f"must exceed n_match={self.n_match}")
        if self.target_n_t * 2 > self.n:
            raise SimConfigError("target_n_t", "must be at most n / 2")
        for name in ("kappa", "rho"):
            vals = getattr(self, name)
            if not vals:
                raise SimConfigError(name, "grid is empty")
            for v in vals:
                if isinstance(v, bool) or not isinstance(v, (int, float)) or not v >= 0:
                    raise SimConfigError(name, f"values must be nonnegative reals, got {v!r}")
        if not self.beta_rate > 0:
            raise SimConfigError("beta_rate", "must be positive")
        if self.scenario not in ("linear", "nonlinear"):
            raise SimConfigError("scenario", "must be 'linear' or 'nonlinear'")
        if not self.learners:
            raise SimConfigError("learners", "library is empty")
        if self.relax_max_controls < 2:
            raise SimConfigError("relax_max_controls", "must be at least 2")
        if self.estimator_set is not None:
            bad = set(self.estimator_set) - set(self.all_estimators())
            if bad:
                raise SimConfigError("estimator_set", f"unknown estimators {sorted(bad)}")

    def all_estimators(self) -> tuple:
        return LINEAR_ESTIMATORS if self.scenario == "linear" else NONLINEAR_ESTIMATORS

    @property
    def estimators(self) -> tuple:
        return self.estimator_set or self.all_estimators()

    def cells(self) -> list[SimCell]:
        return [SimCell(self.n, self.p, self.target_n_t, float(k), float(r), self.beta_rate,
                        self.n_match)
                for k in self.kappa for r in self.rho]

    @classmethod
    def full_scale(cls, **overrides) -> "SimConfig":
        """Full grid at the original dimensions and replication count."""
        base = dict(p=600, kappa=(0.0, 0.1, 0.5), rho=(0.0, 0.004, 0.05), n_runs=1000,
                    learners=("lasso", "random_forest"), rf_trees=500)
        if overrides.get("scenario") == "nonlinear":
            base["n_runs"] = 500
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True, eq=False)
class SimTruth:
    """Potential outcomes and assignment probabilities behind a dataset."""

    y_C: np.ndarray
    y_T: np.ndarray
    tau: np.ndarray
    p_treat: np.ndarray
    treatable: np.ndarray | None = None
    beta: np.ndarray | None = field(default=None, repr=False)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _spectrum_basis(p, rho, rng):
    """Haar-random orthogonal ``Q`` and eigenvalues ``exp(-rho k)``, k = 1..p."""
    A = rng.standard_normal((p, p))
    Q, R = np.linalg.qr(A)
    Q = Q * np.sign(np.diag(R))
    ev = np.exp(-rho * np.arange(1, p + 1))
    return Q, ev


def gen_covariance(p: int, rho: float, seed=None) -> np.ndarray:
    """Random covariance ``Q diag(exp(-rho k)) Q'`` with Haar-distributed ``Q``."""
    if p < 1 or rho < 0:
        raise ValueError("need p >= 1 and rho >= 0")
    Q, ev = _spectrum_basis(p, rho, _rng(seed))
    S = (Q * ev) @ Q.T
    return (S + S.T) / 2


def _draw_covariates(cell: SimCell, rng):
    Q, ev = _spectrum_basis(cell.p, cell.rho, rng)
    g = rng.standard_normal((cell.n, cell.p))
    X = (g * np.sqrt(ev)) @ Q.T
    beta = rng.exponential(1.0 / cell.beta_rate, cell.p - cell.n_match)
    base = X[:, : cell.n_match].sum(axis=1)
    xb = X[:, cell.n_match:] @ beta
    return X, beta, base, xb


def calibrate_intercept(lp, target_mean, lo=-50.0, hi=50.0, tol=1e-10, max_iter=200) -> float:
    """Bisection for ``a`` with ``mean(expit(a + lp)) = target_mean``."""
    f = lambda a: float(np.mean(expit(a + lp))) - target_mean  # noqa: E731
    flo, fhi = f(lo), f(hi)
    if flo > 0 or fhi < 0:
        raise ArithmeticError("intercept calibration is not bracketed")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if abs(fm) <= tol:
            return mid
        if fm < 0:
            lo = mid
        else:
            hi = mid
    raise ArithmeticError("intercept calibration did not converge")


def _dataset(X, Z, Y):
    n, p = X.shape
    return ObservationalDataset(X=X, Z=Z.astype(np.int64), Y=Y,
                                covariate_names=[f"x{j + 1}" for j in range(p)],
                                unit_ids=[str(i) for i in range(n)])


def gen_linear(cell: SimCell, seed=None):
    """Linear outcome and logistic treatment model; returns ``(dataset, truth)``."""
    rng = _rng(seed)
    X, beta, base, xb = _draw_covariates(cell, rng)
    y_c = base + xb + rng.standard_normal(cell.n)
    lp = base + cell.kappa * xb
    alpha = calibrate_intercept(lp, cell.target_n_t / cell.n)
    p_treat = expit(alpha + lp)
    Z = (rng.random(cell.n) < p_treat).astype(np.int64)
    if Z.sum() in (0, cell.n):
        raise ArithmeticError("degenerate treatment draw")
    truth = SimTruth(y_C=y_c, y_T=y_c.copy(), tau=np.zeros(cell.n), p_treat=p_treat, beta=beta)
    return _dataset(X, Z, np.where(Z == 1, truth.y_T, truth.y_C)), truth


def gen_nonlinear(cell: SimCell, seed=None):
    """Treatable top ``2 n_T`` units with reversed outcome slope; exactly
    ``n_T`` of them treated. Returns ``(dataset, truth)``."""
    rng = _rng(seed)
    X, beta, base, xb = _draw_covariates(cell, rng)
    eps = rng.standard_normal(cell.n)
    lp = base + cell.kappa * xb
    n_t = cell.target_n_t
    treatable_idx = np.argsort(-lp, kind="stable")[: 2 * n_t]
    treatable = np.zeros(cell.n, dtype=bool)
    treatable[treatable_idx] = True
    chosen = rng.choice(np.sort(treatable_idx), size=n_t, replace=False)
    Z = np.zeros(cell.n, dtype=np.int64)
    Z[chosen] = 1
    xb_star = base + xb
    y_c = xb_star + eps
    y_c[treatable] = xb_star[treatable].mean() - xb_star[treatable] + eps[treatable]
    y_c = -y_c
    p_treat = np.where(treatable, 0.5, 0.0)
    truth = SimTruth(y_C=y_c, y_T=y_c.copy(), tau=np.zeros(cell.n), p_treat=p_treat,
                     treatable=treatable, beta=beta)
    return _dataset(X, Z, np.where(Z == 1, truth.y_T, truth.y_C)), truth


def _library(names, rf_trees):
    return [RandomForest(n_trees=rf_trees) if nm == "random_forest" else nm for nm in names]


def _fit_remnant(ds, m, library, k_folds, seed):
    """Remnant-trained model, its held-out R^2 and tracked predictions.

    A one-member library skips the super-learner CV layer and reports the
    member's own held-out error.
    """
    rem = m.remnant()
    model, mse, r2 = fit_library(library, ds.X[rem], ds.Y[rem], k_folds, seed)
    return model, mse, r2, RemnantPrediction(model.predict(ds.X), rem)


def _oracle(truth, m, yhat):
    mu = m.matched_units()
    yc = truth.y_C[mu]
    mse = float(np.mean((yc - yhat.values[mu]) ** 2))
    var = float(np.var(yc))
    r2 = 1 - mse / var if var > 0 else float("nan")
    return {"mse_m": mse, "r2_m": r2, "bound": math.sqrt(mse * bound_constant(m))}


def _target(truth, m):
    """Effect on the matched treated (zero by construction)."""
    w = m.n_treated_per_set / m.n_treated
    tr = [t for t, _ in m.sets()]
    return float(sum(wm * truth.tau[t].mean() for wm, t in zip(w, tr)))


def _linear_rows(ds, truth, cfg: SimConfig, seed):
    wanted = set(cfg.estimators)
    Z, Y = ds.Z, ds.Y
    Xm = ds.X[:, : cfg.n_match]
    logits = fit_propensity(ds, list(range(cfg.n_match))).logits
    builders = {
        "psm": lambda: optimal_match(logits, Z, MatchSpec("optimal_pair")),
        "nn": lambda: nearest_neighbor_match(logits, Z),
        "cem": lambda: coarsened_exact_match(Xm, Z, cfg.cem_bins),
    }
    library = _library(cfg.learners, cfg.rf_trees)
    rows = []
    for design, build in builders.items():
        names = [e.split(":")[1] for e in cfg.estimators if e.startswith(design + ":")]
        if not names:
            continue
        try:
            m = build()
            if m.n_sets == 0:
                raise ValueError("empty match")
            _, _, cv_r2, yhat = _fit_remnant(ds, m, library, cfg.k_folds, seed)
            info = {"cv_r2": cv_r2, "n_sets": m.n_sets, "n_matched_treated": m.n_treated,
                    "n_remnant": int(m.remnant().size), **_oracle(truth, m, yhat)}
            e = Y - yhat.values
            est = {}
            if "matching" in names:
                est["matching"] = matching_estimator(Y, Z, m)
            if "rebar" in names:
                est["rebar"] = rebar_estimator(Y, Z, m, yhat)
            if design == "nn":
                if "adjusted" in names:
                    est["adjusted"] = nn_att_estimator(Y, Z, m, adjust=True, X_match=Xm)
                if "adjusted_rebar" in names:
                    yhat.check_against(m)
                    est["adjusted_rebar"] = nn_att_estimator(e, Z, m, adjust=True, X_match=Xm)
            if design == "cem":
                # small CEM samples often make the adjustment design singular;
                # the ridge fallback is expected, so count it instead of warning
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always", RankDeficiencyWarning)
                    if "adjusted" in names:
                        est["adjusted"] = regression_estimator(Y, Z, m, Xm)[0]
                    if "adjusted_rebar" in names:
                        yhat.check_against(m)
                        est["adjusted_rebar"] = regression_estimator(e, Z, m, Xm)[0]
                info["rank_deficient"] = sum(issubclass(w.category, RankDeficiencyWarning)
                                             for w in caught)
            target = _target(truth, m)
            for name in names:
                rows.append({"design": design, "estimator": name, "status": "ok",
                             "estimate": est[name], "truth": target,
                             "error": est[name] - target, **info})
        except Exception as exc:  # recorded, never silently dropped
            for name in names:
                rows.append({"design": design, "estimator": name, "status": "failed",
                             "message": f"{type(exc).__name__}: {exc}"})
    return rows


def _nonlinear_rows(ds, truth, cfg: SimConfig, seed):
    Z, Y = ds.Z, ds.Y
    logits = fit_propensity(ds, list(range(cfg.n_match))).logits
    m, m_big = relax_match(logits, Z, MatchSpec("optimal_pair"),
                           MatchSpec("optimal_ratio", max_controls_per_treated=cfg.relax_max_controls))
    mu, rem = m.matched_units(), m.remnant()
    regimes = {"treatable_in_matched": int(truth.treatable[mu][Z[mu] == 0].sum()),
               "treatable_in_remnant": int(truth.treatable[rem].sum())}
    target = _target(truth, m)
    rows = [{"design": "psm", "estimator": "matching", "status": "ok",
             "estimate": matching_estimator(Y, Z, m), "truth": target, **regimes}]
    rows[0]["error"] = rows[0]["estimate"] - target
    for kind in ("lasso", "random_forest"):
        name = f"rebar_{kind}"
        if f"psm:{name}" not in cfg.estimators:
            continue
        try:
            _, cv_mse, cv_r2, yhat = _fit_remnant(ds, m, _library([kind], cfg.rf_trees),
                                                  cfg.k_folds, seed)
            est = rebar_estimator(Y, Z, m, yhat)
            row = {"design": "psm", "estimator": name, "status": "ok", "estimate": est,
                   "truth": target, "error": est - target, "cv_r2": cv_r2,
                   **_oracle(truth, m, yhat), **regimes}
            if kind == "lasso":
                pv = proximal_validation(ds, m, m_big, [kind], cfg.k_folds, seed,
                                         flag_ratio=cfg.pv_flag_ratio,
                                         reference=(cv_mse, cv_r2))
                row.update(pv_mse=pv.pv_mse, pv_r2=pv.pv_r2, cv_mse=pv.cv_mse,
                           pv_flag=pv.flagged, n_distal=pv.n_distal, n_proximal=pv.n_proximal)
            rows.append(row)
        except Exception as exc:
            rows.append({"design": "psm", "estimator": name, "status": "failed",
                         "message": f"{type(exc).__name__}: {exc}"})
    return [r for r in rows if f"psm:{r['estimator']}" in cfg.estimators]


def run_replication(cfg: SimConfig, cell_index: int, rep: int) -> list[dict]:
    """All estimator rows for one replication of one cell (seed-deterministic)."""
    cell = cfg.cells()[cell_index]
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(cell_index, rep))
    data_seed, fit_seed = ss.spawn(2)
    key = {"scenario": cfg.scenario, "kappa": cell.kappa, "rho": cell.rho, "replication": rep}
    try:
        gen = gen_linear if cfg.scenario == "linear" else gen_nonlinear
        ds, truth = gen(cell, np.random.default_rng(data_seed))
        seed = int(fit_seed.generate_state(1)[0] % (2**31))
        body = (_linear_rows if cfg.scenario == "linear" else _nonlinear_rows)(ds, truth, cfg, seed)
    except Exception as exc:
        return [{**key, "design": e.split(":")[0], "estimator": e.split(":")[1],
                 "status": "failed", "message": f"{type(exc).__name__}: {exc}"}
                for e in cfg.estimators]
    return [{**key, **r} for r in body]


def _task(args):
    return run_replication(*args)


def _columns(df):
    front = ["scenario", "kappa", "rho", "design", "estimator", "replication", "status",
             "estimate", "truth", "error"]
    cols = [c for c in front if c in df.columns]
    return df[cols + sorted(c for c in df.columns if c not in front)]


def summarize(results: pd.DataFrame) -> pd.DataFrame:
    """Per-cell bias, SD and RMSE of the estimation error with Monte-Carlo SEs."""
    keys = ["scenario", "kappa", "rho", "design", "estimator"]
    out = []
    for k, g in results.groupby(keys, sort=False):
        ok = g[g["status"] == "ok"]
        err = ok["error"].to_numpy(dtype=float)
        r = len(err)
        row = dict(zip(keys, k))
        row.update(n_ok=r, n_failed=int(len(g) - r))
        if r:
            bias = float(err.mean())
            sd = float(err.std(ddof=1)) if r > 1 else float("nan")
            rmse = float(np.sqrt(np.mean(err**2)))
            sq = err**2
            row.update(
                bias=bias, sd=sd, rmse=rmse,
                mcse_bias=sd / math.sqrt(r) if r > 1 else float("nan"),
                mcse_rmse=float(sq.std(ddof=1) / (2 * rmse * math.sqrt(r)))
                if r > 1 and rmse > 0 else float("nan"),
            )
            for col in ("cv_r2", "r2_m", "mse_m", "bound", "pv_flag"):
                if col in ok and ok[col].notna().any():
                    row[f"mean_{col}"] = float(ok[col].astype(float).mean())
        out.append(row)
    return pd.DataFrame(out)


def run_study(cfg: SimConfig, out_dir=None, progress=None):
    """Run every cell and replication; optionally write CSVs and a manifest.

    Returns ``(results, summary)`` data frames. Rows are ordered by cell and
    replication regardless of ``cfg.threads``.
    """
    tasks = [(cfg, ci, r) for ci in range(len(cfg.cells())) for r in range(cfg.n_runs)]
    rows = []
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            for i, chunk in enumerate(pool.map(_task, tasks, chunksize=4)):
                rows.extend(chunk)
                if progress:
                    progress(i + 1, len(tasks))
    else:
        for i, t in enumerate(tasks):
            rows.extend(_task(t))
            if progress:
                progress(i + 1, len(tasks))
    results = _columns(pd.DataFrame(rows))
    summary = summarize(results)
    if out_dir is not None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        results.to_csv(out / "results.csv", index=False)
        summary.to_csv(out / "summary.csv", index=False)
        manifest = {"command": "simulate", "version": __version__, "config": cfg.to_dict(),
                    "seed": cfg.seed, "n_tasks": len(tasks),
                    "n_failed_rows": int((results["status"] != "ok").sum()),
                    "outputs": ["results.csv", "summary.csv"]}
        with open(out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2)
    return results, summary
