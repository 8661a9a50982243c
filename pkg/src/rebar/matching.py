"""Match construction: optimal (pair / variable-ratio), nearest neighbor, CEM.

Matches are represented by :class:`MatchAssignment`, a list of memberships
``(unit, set_id)``. A control may appear in several sets only for matches
built with replacement (nearest neighbor).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

__all__ = [
    "METHODS",
    "InfeasibleMatchError",
    "MatchSpec",
    "MatchAssignment",
    "optimal_match",
    "nearest_neighbor_match",
    "coarsened_exact_match",
    "relax_match",
    "match",
    "effective_sample_size",
    "total_distance",
    "write_match_csv",
    "read_match_csv",
]

METHODS = ("optimal_pair", "optimal_ratio", "nearest_neighbor", "coarsened_exact")


class InfeasibleMatchError(ValueError):
    """No match satisfies the constraints; ``unmatchable`` lists treated units."""

    def __init__(self, message, unmatchable=()):
        super().__init__(message)
        self.unmatchable = list(unmatchable)


@dataclass(frozen=True)
class MatchSpec:
    """Matching design.

    ``total_controls`` fixes how many distinct controls an ``optimal_ratio``
    match uses; by default it uses as many as caps and caliper allow.
    """

    method: str = "optimal_pair"
    max_controls_per_treated: int = 1
    caliper: float | None = None
    bins: int = 5
    total_controls: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.max_controls_per_treated < 1:
            raise ValueError("max_controls_per_treated must be >= 1")
        if self.method == "optimal_pair" and self.max_controls_per_treated != 1:
            raise ValueError("optimal_pair requires max_controls_per_treated = 1")
        if self.method == "optimal_ratio" and self.max_controls_per_treated == 1:
            object.__setattr__(self, "method", "optimal_pair")
        if self.caliper is not None and self.caliper < 0:
            raise ValueError("caliper must be nonnegative")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")

    def is_relaxation_of(self, other: "MatchSpec") -> bool:
        """True when this spec strictly weakens ``other``."""
        if self.method not in ("optimal_pair", "optimal_ratio") or \
                other.method not in ("optimal_pair", "optimal_ratio"):
            return False
        cap_ok = self.max_controls_per_treated >= other.max_controls_per_treated
        if other.caliper is None:
            cal_ok = self.caliper is None
        else:
            cal_ok = self.caliper is None or self.caliper >= other.caliper
        strict = (self.max_controls_per_treated > other.max_controls_per_treated
                  or (other.caliper is not None
                      and (self.caliper is None or self.caliper > other.caliper))
                  or (self.total_controls or 0) > (other.total_controls or 0))
        return cap_ok and cal_ok and strict


@dataclass(frozen=True, eq=False)
class MatchAssignment:
    """Matched sets over ``n`` units plus the implied remnant.

    Parameters
    ----------
    z : ndarray of shape (n,)
        Treatment vector the match was built for.
    units, set_ids : ndarray of int
        Parallel arrays of memberships; set ids run ``0..n_sets-1``.
    dropped_treated : ndarray of int
        Treated units left unmatched. Non-empty only when the design
        permits it, and then the estimand is no longer the full ETT.
    """

    z: np.ndarray
    units: np.ndarray
    set_ids: np.ndarray
    dropped_treated: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    method: str = ""
    allow_reuse: bool = False

    def __post_init__(self):
        z = np.asarray(self.z).astype(np.int64)
        units = np.asarray(self.units, dtype=np.int64)
        sets = np.asarray(self.set_ids, dtype=np.int64)
        dropped = np.sort(np.asarray(self.dropped_treated, dtype=np.int64))
        if units.shape != sets.shape:
            raise ValueError("units and set_ids must align")
        n = z.shape[0]
        if units.size and (units.min() < 0 or units.max() >= n):
            raise ValueError("unit index out of range")
        if sets.size:
            uniq, sets = np.unique(sets, return_inverse=True)
        n_sets = int(sets.max()) + 1 if sets.size else 0
        zt = z[units]
        n_t = np.bincount(sets, weights=zt, minlength=n_sets)
        n_c = np.bincount(sets, weights=1 - zt, minlength=n_sets)
        if np.any(n_t < 1) or np.any(n_c < 1):
            raise ValueError("every matched set needs at least one treated and one control")
        treated_members = units[zt == 1]
        if np.unique(treated_members).size != treated_members.size:
            raise ValueError("a treated unit appears in more than one set")
        control_members = units[zt == 0]
        if not self.allow_reuse and np.unique(control_members).size != control_members.size:
            raise ValueError("control reused in a match built without replacement")
        unmatched_t = np.setdiff1d(np.flatnonzero(z == 1), treated_members)
        if not np.array_equal(unmatched_t, dropped):
            raise ValueError(
                "treated units without a set must be declared as dropped "
                f"(unmatched: {unmatched_t.tolist()})"
            )
        order = np.lexsort((units, sets))
        for name, val in (("z", z), ("units", units[order]), ("set_ids", sets[order]),
                          ("dropped_treated", dropped)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @classmethod
    def from_labels(cls, labels, z, method="", allow_dropped=False) -> "MatchAssignment":
        """Build from a per-unit label vector (negative / None = unmatched)."""
        labels = np.asarray([(-1 if v is None else v) for v in labels], dtype=np.int64)
        z = np.asarray(z).astype(np.int64)
        units = np.flatnonzero(labels >= 0)
        dropped = np.flatnonzero((labels < 0) & (z == 1))
        if dropped.size and not allow_dropped:
            raise ValueError(f"treated units {dropped.tolist()} are unmatched")
        return cls(z=z, units=units, set_ids=labels[units], dropped_treated=dropped,
                   method=method)

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def n_sets(self) -> int:
        return int(self.set_ids.max()) + 1 if self.set_ids.size else 0

    @property
    def n_treated_per_set(self) -> np.ndarray:
        return np.bincount(self.set_ids, weights=self.z[self.units],
                           minlength=self.n_sets).astype(int)

    @property
    def n_control_per_set(self) -> np.ndarray:
        return np.bincount(self.set_ids, weights=1 - self.z[self.units],
                           minlength=self.n_sets).astype(int)

    @property
    def n_treated(self) -> int:
        return int(self.n_treated_per_set.sum())

    @property
    def has_reuse(self) -> bool:
        return np.unique(self.units).size != self.units.size

    @property
    def estimand_changed(self) -> bool:
        return self.dropped_treated.size > 0

    @property
    def is_pair_design(self) -> bool:
        return bool(np.all(self.n_treated_per_set == 1) and np.all(self.n_control_per_set == 1))

    @property
    def labels(self) -> np.ndarray:
        """Per-unit set label, -1 for unmatched units."""
        if self.has_reuse:
            raise ValueError("per-unit labels are undefined for matches with reuse")
        out = np.full(self.n, -1, dtype=np.int64)
        out[self.units] = self.set_ids
        return out

    def matched_units(self) -> np.ndarray:
        return np.unique(self.units)

    def remnant(self) -> np.ndarray:
        """Controls that belong to no matched set."""
        controls = np.flatnonzero(self.z == 0)
        return np.setdiff1d(controls, self.units)

    def control_multiplicity(self) -> np.ndarray:
        """How many sets each unit belongs to (length ``n``)."""
        return np.bincount(self.units, minlength=self.n)

    def sets(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """List of ``(treated, controls)`` index arrays per set."""
        out = []
        zt = self.z[self.units]
        bounds = np.flatnonzero(np.diff(self.set_ids)) + 1
        for chunk_u, chunk_z in zip(np.split(self.units, bounds), np.split(zt, bounds)):
            out.append((chunk_u[chunk_z == 1], chunk_u[chunk_z == 0]))
        return out


def _split(logits, Z):
    logits = np.asarray(logits, dtype=float).ravel()
    Z = np.asarray(Z).astype(np.int64).ravel()
    if logits.shape != Z.shape:
        raise ValueError("logits and Z must have equal length")
    return logits, Z, np.flatnonzero(Z == 1), np.flatnonzero(Z == 0)


def _distance_matrix(logits, treated, controls, caliper):
    D = np.abs(logits[treated][:, None] - logits[controls][None, :])
    admissible = np.ones_like(D, dtype=bool) if caliper is None else D <= caliper
    return D, admissible


def _max_controls(admissible, cap):
    """Largest number of distinct controls assignable under caps."""
    slots = np.repeat(admissible, cap, axis=0)
    matching = maximum_bipartite_matching(csr_matrix(slots.astype(np.int8)), perm_type="column")
    return int(np.sum(matching >= 0))


def _solve_ratio(D, admissible, cap, K, forced=None):
    """Min-cost assignment of K distinct controls, 1..cap per treated.

    Rows are treated slots (slot 0 mandatory), columns are controls followed
    by ``n_T*cap - K`` "empty" columns that only optional slots may take.
    Returns (treated_row, control_col) pairs.
    """
    n_t, n_c = D.shape
    n_slots = n_t * cap
    n_empty = n_slots - K
    cost = np.full((n_slots, n_c + n_empty), np.inf)
    real = np.where(admissible, D, np.inf)
    if forced is not None and forced.any():
        bonus = 2.0 * (np.sum(np.max(np.where(admissible, D, 0.0), axis=1)) * cap + 1.0)
        real = real - bonus * forced[None, :]
    cost[:, :n_c] = np.repeat(real, cap, axis=0)
    optional = np.tile(np.arange(cap) > 0, n_t)
    cost[np.ix_(optional, np.arange(n_c, n_c + n_empty))] = 0.0
    try:
        rows, cols = linear_sum_assignment(cost)
    except ValueError as exc:
        raise InfeasibleMatchError(f"no feasible assignment: {exc}") from None
    if np.any(~np.isfinite(cost[rows, cols])):
        raise InfeasibleMatchError("no feasible assignment")
    keep = cols < n_c
    t_rows, c_cols = rows[keep] // cap, cols[keep]
    if t_rows.size > K:
        # zero-distance ties may fill optional slots beyond K; shed the surplus
        order = np.lexsort((-c_cols, -D[t_rows, c_cols]))
        counts = np.bincount(t_rows, minlength=n_t)
        drop = []
        for k in order:
            if len(drop) == t_rows.size - K:
                break
            pinned = forced is not None and forced[c_cols[k]]
            if counts[t_rows[k]] > 1 and D[t_rows[k], c_cols[k]] == 0 and not pinned:
                counts[t_rows[k]] -= 1
                drop.append(k)
        mask = np.ones(t_rows.size, dtype=bool)
        mask[drop] = False
        t_rows, c_cols = t_rows[mask], c_cols[mask]
    return t_rows, c_cols


def optimal_match(logits, Z, spec: MatchSpec = MatchSpec(), _forced_controls=None) -> MatchAssignment:
    """Optimal match without replacement on absolute logit distance.

    Each treated unit receives between 1 and ``spec.max_controls_per_treated``
    distinct controls; the total absolute distance is minimized.

    Raises
    ------
    InfeasibleMatchError
        If some treated unit has no control within the caliper, or the
        requested number of controls cannot be placed.
    """
    if spec.method not in ("optimal_pair", "optimal_ratio"):
        raise ValueError("optimal_match needs an optimal_pair / optimal_ratio spec")
    logits, Z, treated, controls = _split(logits, Z)
    n_t, n_c = treated.size, controls.size
    cap = spec.max_controls_per_treated
    if n_t == 0 or n_c == 0:
        raise InfeasibleMatchError("need treated and control units")
    D, admissible = _distance_matrix(logits, treated, controls, spec.caliper)
    lonely = treated[~admissible.any(axis=1)]
    if lonely.size:
        raise InfeasibleMatchError(
            f"treated units {lonely.tolist()} have no control within caliper {spec.caliper}",
            unmatchable=lonely,
        )
    if _max_controls(admissible, 1) < n_t:
        raise InfeasibleMatchError("cannot give every treated unit its own control "
                                   f"({n_t} treated, {n_c} controls)")
    k_max = n_t if cap == 1 else _max_controls(admissible, cap)
    K = k_max if spec.total_controls is None else spec.total_controls
    if not n_t <= K <= k_max:
        raise InfeasibleMatchError(f"total_controls={K} outside feasible range [{n_t}, {k_max}]")
    forced = None
    if _forced_controls is not None:
        forced = np.isin(controls, _forced_controls)
    t_rows, c_cols = _solve_ratio(D, admissible, cap, K, forced)
    units = np.concatenate([treated, controls[c_cols]])
    set_ids = np.concatenate([np.arange(n_t), t_rows])
    return MatchAssignment(z=Z, units=units, set_ids=set_ids, method=spec.method)


def nearest_neighbor_match(logits, Z) -> MatchAssignment:
    """Match each treated unit to its closest control, with replacement.

    Ties go to the lowest control index. Each treated unit forms its own
    1:1 set, so a reused control appears in several sets.
    """
    logits, Z, treated, controls = _split(logits, Z)
    if controls.size == 0:
        raise InfeasibleMatchError("no control units")
    D = np.abs(logits[treated][:, None] - logits[controls][None, :])
    best = controls[np.argmin(D, axis=1)]
    n_t = treated.size
    return MatchAssignment(
        z=Z,
        units=np.concatenate([treated, best]),
        set_ids=np.concatenate([np.arange(n_t), np.arange(n_t)]),
        method="nearest_neighbor",
        allow_reuse=True,
    )


def coarsen(X, bins: int) -> np.ndarray:
    """Equal-width bin codes for each column over its observed range."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    codes = np.empty(X.shape, dtype=np.int64)
    for j in range(X.shape[1]):
        x = X[:, j]
        lo, hi = x.min(), x.max()
        if hi == lo:
            codes[:, j] = 0
            continue
        edges = np.linspace(lo, hi, bins + 1)
        codes[:, j] = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, bins - 1)
    return codes


def coarsened_exact_match(X_match, Z, bins: int = 5) -> MatchAssignment:
    """Coarsened exact matching on equal-width bins.

    Units sharing every bin code form a matched set when the cell holds both
    treated and controls. Treated units in treated-only cells are dropped
    and reported via ``dropped_treated``.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    Z = np.asarray(Z).astype(np.int64).ravel()
    codes = coarsen(X_match, bins)
    if codes.shape[0] != Z.shape[0]:
        raise ValueError("X_match and Z must have equal length")
    _, cell = np.unique(codes, axis=0, return_inverse=True)
    cell = np.asarray(cell).ravel()
    n_cells = cell.max() + 1
    has_t = np.bincount(cell, weights=Z, minlength=n_cells) > 0
    has_c = np.bincount(cell, weights=1 - Z, minlength=n_cells) > 0
    ok = has_t & has_c
    # relabel matched cells 0..M-1 in order of first appearance
    labels = np.full(Z.shape[0], -1, dtype=np.int64)
    in_set = ok[cell]
    _, first = np.unique(cell[in_set], return_index=True)
    order = np.argsort(np.flatnonzero(in_set)[first])
    remap = np.full(n_cells, -1, dtype=np.int64)
    remap[np.unique(cell[in_set])[order]] = np.arange(order.size)
    labels[in_set] = remap[cell[in_set]]
    return MatchAssignment.from_labels(labels, Z, method="coarsened_exact", allow_dropped=True)


def relax_match(logits, Z, spec: MatchSpec, relaxed_spec: MatchSpec):
    """Base match plus a relaxed match for proximal validation.

    The relaxed match is the optimal match under ``relaxed_spec`` among those
    that keep every control matched under ``spec``, so matched-under-base is
    always contained in matched-under-relaxed. Passing ``relaxed_spec ==
    spec`` returns the base match twice (empty proximal set).
    """
    base = optimal_match(logits, Z, spec)
    if relaxed_spec == spec:
        return base, base
    if not relaxed_spec.is_relaxation_of(spec):
        raise ValueError("relaxed_spec is not a relaxation of spec")
    big = optimal_match(logits, Z, relaxed_spec, _forced_controls=base.matched_units())
    return base, big


def match(spec: MatchSpec, logits=None, Z=None, X_match=None) -> MatchAssignment:
    """Dispatch on ``spec.method``."""
    if spec.method in ("optimal_pair", "optimal_ratio"):
        return optimal_match(logits, Z, spec)
    if spec.method == "nearest_neighbor":
        return nearest_neighbor_match(logits, Z)
    if X_match is None:
        raise ValueError("coarsened_exact matching needs X_match")
    return coarsened_exact_match(X_match, Z, spec.bins)


def harmonic_mean(a, b):
    return 2.0 / (1.0 / a + 1.0 / b)


def effective_sample_size(m: MatchAssignment) -> float:
    """Sum over sets of the harmonic mean of treated and control counts."""
    return float(np.sum(harmonic_mean(m.n_treated_per_set, m.n_control_per_set)))


def total_distance(m: MatchAssignment, logits) -> float:
    """Sum over sets of |logit_treated - logit_control| for every T-C pair in
    a set with one treated unit (the optimal-match objective)."""
    logits = np.asarray(logits, dtype=float)
    total = 0.0
    for t, c in m.sets():
        total += np.abs(logits[t][:, None] - logits[c][None, :]).sum()
    return float(total)


def write_match_csv(m: MatchAssignment, path, unit_ids: Sequence | None = None) -> None:
    """Write one row per membership plus one per unmatched unit.

    Unmatched controls get label ``REMNANT``; dropped treated ``DROPPED``.
    """
    ids = list(range(m.n)) if unit_ids is None else list(unit_ids)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit_id", "set_label"])
        rows = [(u, str(s)) for u, s in zip(m.units.tolist(), m.set_ids.tolist())]
        rows += [(u, "REMNANT") for u in m.remnant().tolist()]
        rows += [(u, "DROPPED") for u in m.dropped_treated.tolist()]
        for u, lab in sorted(rows, key=lambda r: r[0]):
            w.writerow([ids[u], lab])


def read_match_csv(path, Z, unit_ids: Sequence | None = None, method="") -> MatchAssignment:
    Z = np.asarray(Z).astype(np.int64)
    ids = list(range(len(Z))) if unit_ids is None else list(unit_ids)
    pos = {str(u): i for i, u in enumerate(ids)}
    units, sets, dropped = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            i = pos[row["unit_id"]]
            if row["set_label"] == "DROPPED":
                dropped.append(i)
            elif row["set_label"] != "REMNANT":
                units.append(i)
                sets.append(int(row["set_label"]))
    reuse = len(set(units)) != len(units)
    return MatchAssignment(z=Z, units=np.array(units, dtype=int), set_ids=np.array(sets, dtype=int),
                           dropped_treated=np.array(dropped, dtype=int), method=method,
                           allow_reuse=reuse)
