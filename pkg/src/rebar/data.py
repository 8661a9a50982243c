"""Core data model: observational datasets, CSV ingestion and the outcome box."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

__all__ = [
    "DataValidationError",
    "LeakageError",
    "ObservationalDataset",
    "DatasetSchema",
    "OutcomeBox",
    "load_dataset",
    "write_dataset",
    "split_remnant",
]


class DataValidationError(ValueError):
    """Raised when input data violates the dataset invariants."""


class LeakageError(RuntimeError):
    """Raised when an outcome model has touched matched-sample outcomes."""


@dataclass(frozen=True)
class ObservationalDataset:
    """Units, covariates, binary treatment and outcome, index-aligned.

    Parameters
    ----------
    X : ndarray of shape (n, p)
        Covariate matrix.
    Z : ndarray of shape (n,)
        Treatment indicator, 1 for treated.
    Y : ndarray of shape (n,)
        Observed outcome.
    covariate_names : sequence of str, optional
        Column names of ``X``; defaults to ``x0, x1, ...``.
    unit_ids : sequence, optional
        Opaque unit identifiers; defaults to ``0..n-1``.
    """

    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    covariate_names: tuple = ()
    unit_ids: tuple = ()

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise DataValidationError("X must be two-dimensional")
        n, p = X.shape
        Y = np.asarray(self.Y, dtype=float).ravel()
        Z_raw = np.asarray(self.Z).ravel()
        if Y.shape[0] != n or Z_raw.shape[0] != n:
            raise DataValidationError(
                f"length mismatch: X has {n} rows, Z has {Z_raw.shape[0]}, Y has {Y.shape[0]}"
            )
        Z = _as_binary(Z_raw)
        if Z.sum() == 0 or Z.sum() == n:
            raise DataValidationError("need at least one treated and one control unit")
        if not np.all(np.isfinite(X)):
            raise DataValidationError("non-finite covariate values")
        if not np.all(np.isfinite(Y)):
            raise DataValidationError("non-finite outcome values")
        names = tuple(self.covariate_names) or tuple(f"x{j}" for j in range(p))
        if len(names) != p:
            raise DataValidationError(f"{len(names)} covariate names for {p} columns")
        ids = tuple(self.unit_ids) or tuple(range(n))
        if len(ids) != n:
            raise DataValidationError(f"{len(ids)} unit ids for {n} units")
        for arr in (X, Y, Z):
            arr.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "unit_ids", ids)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n_treated(self) -> int:
        return int(self.Z.sum())

    @property
    def n_control(self) -> int:
        return self.n - self.n_treated

    def columns(self, names: Sequence[str] | Sequence[int]) -> np.ndarray:
        """Return the covariate columns selected by name or position."""
        return self.X[:, self.column_index(names)]

    def column_index(self, names) -> np.ndarray:
        idx = []
        for name in names:
            if isinstance(name, (int, np.integer)):
                if not 0 <= name < self.p:
                    raise DataValidationError(f"covariate index {name} out of range")
                idx.append(int(name))
            else:
                try:
                    idx.append(self.covariate_names.index(name))
                except ValueError:
                    raise DataValidationError(f"unknown covariate {name!r}") from None
        return np.asarray(idx, dtype=int)

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.X, columns=list(self.covariate_names))
        df.insert(0, "y", self.Y)
        df.insert(0, "z", self.Z)
        df.insert(0, "id", list(self.unit_ids))
        return df


def _as_binary(z) -> np.ndarray:
    z = np.asarray(z)
    if z.dtype == bool:
        return z.astype(np.int64)
    try:
        zf = z.astype(float)
    except (TypeError, ValueError):
        raise DataValidationError("non-binary treatment") from None
    if not np.all(np.isin(zf, (0.0, 1.0))):
        raise DataValidationError("non-binary treatment")
    return zf.astype(np.int64)


@dataclass(frozen=True)
class DatasetSchema:
    """Column roles for CSV ingestion.

    ``covariates=None`` means every column that is not the id, treatment or
    outcome. ``missing`` is ``"reject"`` or ``"impute"`` (mean imputation
    plus a 0/1 missingness indicator per affected column).
    """

    treatment: str
    outcome: str
    id: str | None = None
    covariates: tuple | None = None
    categorical: tuple = ()
    missing: str = "reject"


def load_dataset(path, schema: DatasetSchema) -> ObservationalDataset:
    """Read a CSV with a header row into a validated dataset.

    Non-numeric covariates (and any listed in ``schema.categorical``) are
    one-hot coded with the first level, in sorted order, dropped.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if schema.missing not in ("reject", "impute"):
        raise DataValidationError(f"unknown missing-value policy {schema.missing!r}")
    df = pd.read_csv(path, float_precision="round_trip")
    role_cols = [schema.treatment, schema.outcome] + ([schema.id] if schema.id else [])
    missing_cols = [c for c in role_cols if c not in df.columns]
    if schema.covariates is not None:
        missing_cols += [c for c in schema.covariates if c not in df.columns]
    if missing_cols:
        raise DataValidationError(f"missing columns: {', '.join(missing_cols)}")

    z = df[schema.treatment]
    if z.isna().any():
        raise DataValidationError("non-binary treatment: missing values")
    Z = _as_binary(z.to_numpy())
    y_raw = df[schema.outcome]
    y = pd.to_numeric(y_raw, errors="coerce")
    if (y.isna() & y_raw.notna()).any():
        raise DataValidationError("non-numeric outcome")
    if y.isna().any():
        raise DataValidationError("NaN policy violation: missing outcome values")

    if schema.covariates is None:
        cov_cols = [c for c in df.columns if c not in role_cols]
    else:
        cov_cols = list(schema.covariates)
    if not cov_cols:
        raise DataValidationError("no covariate columns")

    blocks = []
    for col in cov_cols:
        s = df[col]
        categorical = col in schema.categorical or not pd.api.types.is_numeric_dtype(s)
        if categorical:
            if s.isna().any():
                if schema.missing == "reject":
                    raise DataValidationError(f"NaN policy violation: missing values in {col!r}")
                s = s.astype(object).where(s.notna(), "__missing__")
            levels = sorted(pd.unique(s.astype(str)))
            s = s.astype(str)
            for level in levels[1:]:
                blocks.append((f"{col}[{level}]", (s == level).to_numpy(dtype=float)))
            continue
        values = s.to_numpy(dtype=float)
        nan = ~np.isfinite(values)
        if nan.any():
            if schema.missing == "reject":
                raise DataValidationError(f"NaN policy violation: missing values in {col!r}")
            if nan.all():
                raise DataValidationError(f"column {col!r} is entirely missing")
            values = values.copy()
            values[nan] = values[~nan].mean()
            blocks.append((col, values))
            blocks.append((f"{col}__missing", nan.astype(float)))
        else:
            blocks.append((col, values))

    names = tuple(b[0] for b in blocks)
    X = np.column_stack([b[1] for b in blocks])
    ids = tuple(df[schema.id].tolist()) if schema.id else ()
    return ObservationalDataset(X=X, Z=Z, Y=y.to_numpy(dtype=float),
                                covariate_names=names, unit_ids=ids)


def write_dataset(ds: ObservationalDataset, path) -> None:
    """Write ``ds`` as CSV (columns ``id, z, y, <covariates>``).

    Floats are written with shortest round-trip repr so that
    :func:`load_dataset` recovers them bit for bit.
    """
    ds.to_frame().to_csv(path, index=False)


def split_remnant(ds: ObservationalDataset, match) -> tuple[np.ndarray, np.ndarray]:
    """Partition unit indices into the matched sample and the remnant.

    Returns ``(matched, remnant)``: sorted index arrays. ``matched`` holds
    every unit appearing in a matched set; ``remnant`` the controls that
    appear in none. Treated units dropped by the match are in neither.
    """
    if match.n != ds.n:
        raise DataValidationError("match built for a different number of units")
    if not np.array_equal(match.z, ds.Z):
        raise DataValidationError("match built for a different treatment vector")
    return match.matched_units(), match.remnant()


@dataclass
class OutcomeBox:
    """Outcome vector held in a "locked box" with an access log.

    Reads are refused until :meth:`unlock` is called (after the match has
    been frozen), and every index read is recorded under the current stage
    label so callers can prove which outcomes a stage touched.
    """

    _y: np.ndarray
    locked: bool = True
    stage: str = "init"
    log: dict = field(default_factory=dict)

    def __post_init__(self):
        self._y = np.asarray(self._y, dtype=float)
        self._y.setflags(write=False)

    def __len__(self):
        return self._y.shape[0]

    def unlock(self, stage: str = "analysis") -> None:
        self.locked = False
        self.stage = stage

    def set_stage(self, stage: str) -> None:
        self.stage = stage

    def take(self, idx) -> np.ndarray:
        if self.locked:
            raise LeakageError("outcomes read before the match was frozen")
        idx = np.asarray(idx, dtype=int)
        seen = self.log.setdefault(self.stage, set())
        seen.update(idx.tolist())
        return self._y[idx]

    def take_all(self) -> np.ndarray:
        return self.take(np.arange(len(self)))

    def touched(self, stage: str) -> set:
        return set(self.log.get(stage, set()))
