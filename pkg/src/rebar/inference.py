"""Within-set permutation tests and confidence intervals by test inversion.

Confidence intervals assume a constant additive effect: under ``H0: tau = t``
the adjusted outcomes ``Y - t Z`` are fixed under every reassignment.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .estimators import matching_estimator, matching_weights
from .matching import MatchAssignment

__all__ = [
    "EXACT",
    "PermutationPlan",
    "n_assignments",
    "permuted_assignments",
    "permutation_distribution",
    "permutation_test",
    "permutation_ci",
]

EXACT = "exact"


@dataclass(frozen=True)
class PermutationPlan:
    """How reassignments are drawn.

    Parameters
    ----------
    n_perms : int or ``"exact"``
        Monte-Carlo draws, or full enumeration of within-set reassignments.
    seed : int
    shift_grid : sequence of float, optional
        Candidate effects for CI inversion; built around the estimate if omitted.
    exact_cap : int
        Largest number of reassignments ``"exact"`` will enumerate.
    """

    n_perms: int | str = 999
    seed: int = 0
    shift_grid: tuple | None = None
    exact_cap: int = 10**6

    def __post_init__(self):
        if self.n_perms != EXACT and not (isinstance(self.n_perms, (int, np.integer))
                                          and self.n_perms >= 1):
            raise ValueError("n_perms must be a positive integer or 'exact'")
        if self.shift_grid is not None:
            object.__setattr__(self, "shift_grid", tuple(sorted(float(t) for t in self.shift_grid)))

    @property
    def exact(self) -> bool:
        return self.n_perms == EXACT


def n_assignments(m: MatchAssignment) -> int:
    """Number of within-set reassignments, ``prod_m C(n_m, n_Tm)``."""
    nt, nc = m.n_treated_per_set, m.n_control_per_set
    return math.prod(math.comb(int(a + b), int(a)) for a, b in zip(nt, nc))


def _check(m: MatchAssignment, allow_reuse=False):
    if m.has_reuse and not allow_reuse:
        raise ValueError("within-set permutation needs a match without control reuse")
    if m.n_sets == 0:
        raise ValueError("empty match")


def permuted_assignments(m: MatchAssignment, Z, plan: PermutationPlan,
                         allow_reuse=False) -> np.ndarray:
    """Treatment values of the membership rows under each reassignment.

    Returns an array of shape ``(n_draws, len(m.units))``; each row keeps
    ``n_Tm`` treated in every set. Matches with control reuse are refused
    unless ``allow_reuse`` (then each membership row is permuted on its own).
    """
    _check(m, allow_reuse)
    zt = np.asarray(Z)[m.units].astype(np.int8)
    if plan.exact:
        total = n_assignments(m)
        if total > plan.exact_cap:
            raise ValueError(f"{total} reassignments exceed exact_cap={plan.exact_cap}")
        per_set = []
        for nt_m, size in zip(m.n_treated_per_set, np.bincount(m.set_ids)):
            opts = []
            for pos in itertools.combinations(range(size), int(nt_m)):
                v = np.zeros(size, dtype=np.int8)
                v[list(pos)] = 1
                opts.append(v)
            per_set.append(opts)
        return np.array([np.concatenate(c) for c in itertools.product(*per_set)], dtype=np.int8)
    rng = np.random.default_rng(plan.seed)
    keys = rng.random((int(plan.n_perms), zt.size)) + m.set_ids[None, :]
    order = np.argsort(keys, axis=1, kind="stable")
    return zt[order]


def _fast_stats(Zs, m, values):
    """Matching-estimator statistics for every row of ``Zs`` (vectorized)."""
    nt = m.n_treated_per_set[m.set_ids]
    nc = m.n_control_per_set[m.set_ids]
    n_t = m.n_treated
    coef = Zs / n_t - (1 - Zs) * (nt / (n_t * nc))
    return coef @ values


def _is_matching(statistic):
    return statistic is None or statistic is matching_estimator


def permutation_distribution(statistic, Y, Z, m: MatchAssignment, plan: PermutationPlan,
                             _Zs=None):
    """Observed statistic and its values under reassignment.

    ``statistic(Y, Z, m)`` is any estimator; ``None`` means the matching
    estimator, evaluated in vectorized form.
    """
    Y = np.asarray(Y, dtype=float)
    Z = np.asarray(Z)
    Zs = permuted_assignments(m, Z, plan) if _Zs is None else _Zs
    if _is_matching(statistic):
        obs = float(matching_weights(Z, m) @ Y[m.units])
        return obs, _fast_stats(Zs, m, Y[m.units])
    obs = float(statistic(Y, Z, m))
    Zp = Z.copy()
    null = np.empty(Zs.shape[0])
    for k, row in enumerate(Zs):
        Zp[m.units] = row
        null[k] = statistic(Y, Zp, m)
    return obs, null


def _two_sided_p(obs, null, exact):
    scale = max(abs(obs), float(np.max(np.abs(null))) if null.size else 0.0)
    tol = 1e-9 * scale
    r = int(np.count_nonzero(np.abs(null) >= abs(obs) - tol))
    if exact:
        return r / null.size
    return (r + 1) / (null.size + 1)


def permutation_test(statistic, Y, Z, m: MatchAssignment, plan: PermutationPlan = PermutationPlan()) -> float:
    """Two-sided permutation p-value for the sharp null of no effect.

    Monte-Carlo mode returns ``(#{|T*| >= |T|} + 1) / (n_perms + 1)``;
    exact mode returns the enumerated tail fraction.
    """
    obs, null = permutation_distribution(statistic, Y, Z, m, plan)
    return _two_sided_p(obs, null, plan.exact)


def permutation_ci(statistic, Y, Z, m: MatchAssignment, plan: PermutationPlan = PermutationPlan(),
                   level: float = 0.95, max_expansions: int = 2):
    """Confidence interval ``{t : p(t) > 1 - level}`` by inverting the test.

    Every candidate ``t`` is tested with the same reassignments. Endpoints
    are refined by bisection to ``1e-3 * SD(Y)`` over the matched units and
    reported on the accepted side.
    """
    if not 0 <= level < 1:
        raise ValueError("level must lie in [0, 1)")
    Y = np.asarray(Y, dtype=float)
    Z = np.asarray(Z)
    Zs = permuted_assignments(m, Z, plan)
    u = m.units
    if _is_matching(statistic):
        c0 = matching_weights(Z, m)
        a0, b0 = c0 @ Y[u], c0 @ Z[u]
        A, B = _fast_stats(Zs, m, Y[u]), _fast_stats(Zs, m, Z[u].astype(float))

        def pval(t):
            return _two_sided_p(a0 - t * b0, A - t * B, plan.exact)

        center = a0 / b0
        spread = float(np.std(A - center * B))
    else:
        def pval(t):
            obs, null = permutation_distribution(statistic, Y - t * Z, Z, m, plan, _Zs=Zs)
            return _two_sided_p(obs, null, plan.exact)

        center = float(statistic(Y, Z, m))
        _, null = permutation_distribution(statistic, Y - center * Z, Z, m, plan, _Zs=Zs)
        spread = float(np.std(null))
    sd_y = float(np.std(Y[np.unique(u)], ddof=1)) if np.unique(u).size > 1 else 0.0
    if spread <= 0:
        spread = sd_y if sd_y > 0 else 1.0
    if plan.shift_grid is not None:
        grid = np.asarray(plan.shift_grid)
    else:
        grid = center + spread * np.linspace(-4, 4, 81)
    step = float(np.min(np.diff(grid))) if grid.size > 1 else spread
    res = 1e-3 * sd_y if sd_y > 0 else 1e-3 * step
    alpha = 1 - level
    if level == 0:
        g = float(grid[np.argmin(np.abs(grid - center))])
        return g, g

    for expansion in range(max_expansions + 1):
        ok = np.array([pval(t) > alpha for t in grid])
        if not ok.any():
            raise ValueError("no grid point is accepted; supply a shift_grid around the estimate")
        idx = np.flatnonzero(ok)
        if idx[0] > 0 and idx[-1] < grid.size - 1:
            break
        if expansion == max_expansions:
            raise ValueError("confidence interval reaches the grid edge after expansion")
        width = grid[-1] - grid[0]
        k = max(1, int(round(width / step / 2)))
        grid = np.concatenate([grid[0] - step * np.arange(k, 0, -1), grid,
                               grid[-1] + step * np.arange(1, k + 1)])

    def refine(rej, acc):
        while abs(acc - rej) > res:
            mid = 0.5 * (rej + acc)
            if pval(mid) > alpha:
                acc = mid
            else:
                rej = mid
        return acc

    lo = refine(grid[idx[0] - 1], grid[idx[0]])
    hi = refine(grid[idx[-1] + 1], grid[idx[-1]])
    return float(lo), float(hi)
