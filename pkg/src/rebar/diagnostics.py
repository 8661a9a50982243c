"""Covariate balance, prediction balance and proximal validation."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import ObservationalDataset, OutcomeBox
from .estimators import matching_weights
from .inference import PermutationPlan, permuted_assignments
from .learners import fit_library
from .matching import MatchAssignment

__all__ = [
    "BalanceRow",
    "BalanceReport",
    "ProximalValidationReport",
    "pooled_sd",
    "standardized_differences",
    "omnibus_balance_test",
    "balance_report",
    "yhat_balance",
    "proximal_validation",
    "augment_with_score",
]


@dataclass(frozen=True)
class BalanceRow:
    name: str
    std_diff_unmatched: float
    std_diff_matched: float | None
    z_unmatched: float
    z_matched: float | None


@dataclass
class BalanceReport:
    rows: list
    omnibus_p_unmatched: float | None = None
    omnibus_p_matched: float | None = None

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows],
                "omnibus_p_unmatched": self.omnibus_p_unmatched,
                "omnibus_p_matched": self.omnibus_p_matched}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["covariate", "std_diff_unmatched", "std_diff_matched",
                        "z_unmatched", "z_matched"])
            for r in self.rows:
                w.writerow([r.name, r.std_diff_unmatched, r.std_diff_matched,
                            r.z_unmatched, r.z_matched])
            w.writerow(["omnibus_p", self.omnibus_p_unmatched, self.omnibus_p_matched, "", ""])

    def to_text(self) -> str:
        def f(x):
            return "" if x is None else f"{x:.2f}"

        name_w = max([len(r.name) for r in self.rows] + [8])
        lines = [f"{'':<{name_w}}  {'unmatched':>9}  {'matched':>9}  {'z_unm':>7}  {'z_mat':>7}"]
        for r in self.rows:
            lines.append(f"{r.name:<{name_w}}  {f(r.std_diff_unmatched):>9}  "
                         f"{f(r.std_diff_matched):>9}  {f(r.z_unmatched):>7}  {f(r.z_matched):>7}")
        lines.append(f"{'omnibus p':<{name_w}}  {f(self.omnibus_p_unmatched):>9}  "
                     f"{f(self.omnibus_p_matched):>9}")
        return "\n".join(lines)


def _as_matrix(X):
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def _resolve(ds: ObservationalDataset, covariates):
    if covariates is None:
        return ds.X, list(ds.covariate_names)
    idx = ds.column_index(covariates)
    return ds.X[:, idx], [ds.covariate_names[i] for i in idx]


def pooled_sd(X, Z) -> np.ndarray:
    """``sqrt((s_T^2 + s_C^2) / 2)`` per column over the full sample."""
    X = _as_matrix(X)
    Z = np.asarray(Z)
    vt = X[Z == 1].var(axis=0, ddof=1) if np.sum(Z == 1) > 1 else np.zeros(X.shape[1])
    vc = X[Z == 0].var(axis=0, ddof=1) if np.sum(Z == 0) > 1 else np.zeros(X.shape[1])
    return np.sqrt((vt + vc) / 2)


def _safe_div(a, b):
    a = np.asarray(a, dtype=float)
    b = np.broadcast_to(np.asarray(b, dtype=float), a.shape)
    out = np.zeros_like(a)
    np.divide(a, b, out=out, where=b > 0)
    return out


def _mean_diff(X, Z, m=None):
    if m is None:
        return X[Z == 1].mean(axis=0) - X[Z == 0].mean(axis=0)
    return matching_weights(Z, m) @ X[m.units]


def _perm_cov(X, Z, m=None):
    """Exact randomization covariance of the mean-difference vector."""
    if m is None:
        n, n_t = Z.size, int(Z.sum())
        S = np.atleast_2d(np.cov(X, rowvar=False))
        return S * n / (n_t * (n - n_t))
    w = m.n_treated_per_set / m.n_treated
    nt, nc = m.n_treated_per_set, m.n_control_per_set
    k = X.shape[1]
    cov = np.zeros((k, k))
    Xu = X[m.units]
    for s in range(m.n_sets):
        rows = Xu[m.set_ids == s]
        n_m = rows.shape[0]
        Sm = np.atleast_2d(np.cov(rows, rowvar=False))
        cov += w[s] ** 2 * Sm * n_m / (nt[s] * nc[s])
    return cov


def _pinv(S):
    U, s, Vt = np.linalg.svd(S)
    keep = s > 1e-10 * (s[0] if s.size and s[0] > 0 else 1.0)
    if not keep.any():
        return np.zeros_like(S)
    return (Vt[keep].T / s[keep]) @ U[:, keep].T


def standardized_differences(X, Z, names=None, m: MatchAssignment | None = None) -> list:
    """Standardized mean differences and randomization z-scores per column.

    The matched difference combines within-set gaps with weights
    ``n_Tm / n_T``; both versions divide by the full-sample pooled SD.
    Constant columns get 0.
    """
    X = _as_matrix(X)
    Z = np.asarray(Z)
    names = names or [f"x{j}" for j in range(X.shape[1])]
    sp = pooled_sd(X, Z)
    d_u = _mean_diff(X, Z)
    z_u = _safe_div(d_u, np.sqrt(np.clip(np.diag(_perm_cov(X, Z)), 0, None)))
    if m is not None:
        d_m = _mean_diff(X, Z, m)
        z_m = _safe_div(d_m, np.sqrt(np.clip(np.diag(_perm_cov(X, Z, m)), 0, None)))
        sd_m = _safe_div(d_m, sp)
    sd_u = _safe_div(d_u, sp)
    rows = []
    for j, name in enumerate(names):
        rows.append(BalanceRow(
            name=str(name),
            std_diff_unmatched=float(sd_u[j]),
            std_diff_matched=None if m is None else float(sd_m[j]),
            z_unmatched=float(z_u[j]),
            z_matched=None if m is None else float(z_m[j]),
        ))
    return rows


def _wholesale_perms(Z, n_perms, seed):
    rng = np.random.default_rng(seed)
    keys = rng.random((n_perms, Z.size))
    return Z[np.argsort(keys, axis=1)]


def omnibus_balance_test(X, Z, m: MatchAssignment | None = None, n_perms=999, seed=0) -> float:
    """Permutation p-value of ``d' S^+ d`` for the mean-difference vector ``d``.

    ``S`` is the exact randomization covariance of ``d``. Treatment is
    permuted within matched sets when ``m`` is given, wholesale otherwise;
    ``p = (r + 1) / (n_perms + 1)``.
    """
    if n_perms < 100:
        raise ValueError("n_perms must be at least 100")
    X = _as_matrix(X)
    Z = np.asarray(Z).astype(np.int64)
    P = _pinv(_perm_cov(X, Z, m))
    if m is None:
        Zs = _wholesale_perms(Z, n_perms, seed).astype(float)
        n_t = Z.sum()
        n_c = Z.size - n_t
        D = (Zs / n_t - (1 - Zs) / n_c) @ X
        d = _mean_diff(X, Z)
    else:
        Zs = permuted_assignments(m, Z, PermutationPlan(n_perms=n_perms, seed=seed),
                                  allow_reuse=True).astype(float)
        nt = m.n_treated_per_set[m.set_ids]
        nc = m.n_control_per_set[m.set_ids]
        coef = Zs / m.n_treated - (1 - Zs) * (nt / (m.n_treated * nc))
        D = coef @ X[m.units]
        d = _mean_diff(X, Z, m)
    stat = float(d @ P @ d)
    null = np.einsum("ij,jk,ik->i", D, P, D)
    tol = 1e-9 * max(abs(stat), 1e-300)
    r = int(np.count_nonzero(null >= stat - tol))
    return (r + 1) / (n_perms + 1)


def balance_report(ds: ObservationalDataset, covariates=None, m: MatchAssignment | None = None,
                   n_perms=999, seed=0, extra=None) -> BalanceReport:
    """Balance table for ``covariates`` (all columns by default).

    ``extra`` maps names to additional pseudo-covariates, e.g. predictions.
    """
    X, names = _resolve(ds, covariates)
    if extra:
        X = np.column_stack([X] + [np.asarray(v, dtype=float) for v in extra.values()])
        names = names + list(extra)
    rows = standardized_differences(X, ds.Z, names, m)
    return BalanceReport(
        rows=rows,
        omnibus_p_unmatched=omnibus_balance_test(X, ds.Z, None, n_perms, seed),
        omnibus_p_matched=None if m is None else omnibus_balance_test(X, ds.Z, m, n_perms, seed),
    )


def yhat_balance(ds_or_z, m: MatchAssignment, yhat, n_perms=999, seed=0):
    """Matched standardized difference and omnibus p-value of the predictions."""
    Z = ds_or_z.Z if isinstance(ds_or_z, ObservationalDataset) else np.asarray(ds_or_z)
    v = np.asarray(getattr(yhat, "values", yhat), dtype=float)
    row = standardized_differences(v, Z, ["yhat"], m)[0]
    return row.std_diff_matched, omnibus_balance_test(v, Z, m, n_perms, seed)


@dataclass
class ProximalValidationReport:
    """Distal-trained, proximal-tested error next to remnant-wide CV error."""

    cv_mse: float
    cv_r2: float
    pv_mse: float
    pv_r2: float
    n_distal: int
    n_proximal: int
    flag_ratio: float = 1.25
    library: list = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return self.pv_mse > self.flag_ratio * self.cv_mse

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flagged"] = self.flagged
        return d


def proximal_validation(ds: ObservationalDataset, m: MatchAssignment, m_big: MatchAssignment,
                        learner_library=("lasso", "random_forest"), k_folds=5, seed=0,
                        box: OutcomeBox | None = None, flag_ratio=1.25,
                        features=None, reference=None
                        ) -> ProximalValidationReport:
    """Check how a remnant-trained model extrapolates toward the matched sample.

    The remnant of ``m`` is split into proximal units (matched under the
    relaxed ``m_big``) and distal units (matched under neither). The super
    learner (or the lone library member) is fit on distal rows and scored
    on proximal rows; a second fit on the whole remnant supplies the
    cross-validated comparison, unless ``reference = (cv_mse, cv_r2)`` is
    passed from an earlier fit. Only remnant outcomes are read.
    """
    remnant = m.remnant()
    proximal = np.intersect1d(remnant, m_big.matched_units())
    distal = np.setdiff1d(remnant, proximal)
    if proximal.size == 0:
        raise ValueError("proximal set is empty; the relaxed match adds no remnant controls")
    if distal.size < k_folds:
        raise ValueError("too few distal units to fit the outcome model")
    X = ds.X if features is None else np.asarray(features, dtype=float)
    y_rem = box.take(remnant) if box is not None else np.asarray(ds.Y)[remnant]
    pos = {u: i for i, u in enumerate(remnant)}
    y_dist = y_rem[[pos[u] for u in distal]]
    y_prox = y_rem[[pos[u] for u in proximal]]
    library = list(learner_library)
    if reference is None:
        _, cv_mse, cv_r2 = fit_library(library, X[remnant], y_rem, k_folds, seed)
    else:
        cv_mse, cv_r2 = reference
    far, _, _ = fit_library(library, X[distal], y_dist, k_folds, seed)
    pv_mse = float(np.mean((far.predict(X[proximal]) - y_prox) ** 2))
    var_p = float(np.var(y_prox))
    pv_r2 = 1.0 - pv_mse / var_p if var_p > 0 else (0.0 if pv_mse == 0 else -np.inf)
    return ProximalValidationReport(cv_mse=float(cv_mse), cv_r2=float(cv_r2), pv_mse=pv_mse,
                                    pv_r2=pv_r2, n_distal=int(distal.size),
                                    n_proximal=int(proximal.size), flag_ratio=flag_ratio,
                                    library=[str(x) for x in library])


def augment_with_score(X, logits) -> np.ndarray:
    """Append the propensity score and its interactions with every column."""
    X = _as_matrix(X)
    pi = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=float)))
    return np.column_stack([X, pi, X * pi[:, None]])
