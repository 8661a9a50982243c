import itertools

import numpy as np
import pytest
from conftest import match_from_sizes
from hypothesis import given, settings
from hypothesis import strategies as st

from rebar import PermutationPlan, matching_estimator, permutation_ci, permutation_test
from rebar.inference import EXACT, n_assignments, permutation_distribution, permuted_assignments


def test_permuted_assignments_keep_counts():
    m, z = match_from_sizes([(1, 2), (2, 2), (1, 1)])
    Zs = permuted_assignments(m, z, PermutationPlan(n_perms=200, seed=1))
    for s in range(m.n_sets):
        cols = m.set_ids == s
        np.testing.assert_array_equal(Zs[:, cols].sum(axis=1), m.n_treated_per_set[s])


def test_constant_statistic_p_one():
    m, z = match_from_sizes([(1, 1)] * 5)
    p = permutation_test(lambda Y, Z, m: 3.0, np.arange(10.0), z, m, PermutationPlan(99))
    assert p == 1.0


def test_large_effect_minimum_p(rng):
    m, z = match_from_sizes([(1, 1)] * 20)
    Y = rng.normal(size=40) + 10 * z
    assert permutation_test(None, Y, z, m, PermutationPlan(999)) == pytest.approx(1 / 1000)


def test_exact_mode_matches_hand_enumeration():
    m, z = match_from_sizes([(1, 1), (1, 2)])
    Y = np.array([3.0, 1.0, 2.0, 0.5, 0.0])
    obs = matching_estimator(Y, z, m)
    stats = []
    for a in itertools.combinations(range(2), 1):
        for b in itertools.combinations(range(3), 1):
            zz = np.zeros(5, int)
            zz[a[0]] = 1
            zz[2 + b[0]] = 1
            stats.append(matching_estimator(Y, zz, m))
    hand = np.mean(np.abs(stats) >= abs(obs) - 1e-12)
    assert n_assignments(m) == 6
    assert permutation_test(None, Y, z, m, PermutationPlan(EXACT)) == pytest.approx(hand)


def test_generic_statistic_agrees_with_fast_path(rng):
    m, z = match_from_sizes([(1, 2), (1, 1), (2, 3)])
    Y = rng.normal(size=z.size)
    plan = PermutationPlan(200, seed=4)
    a = permutation_distribution(None, Y, z, m, plan)
    b = permutation_distribution(lambda Y, Z, m: matching_estimator(Y, Z, m), Y, z, m, plan)
    assert a[0] == pytest.approx(b[0])
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1e4, 1e4), st.integers(0, 2**31 - 1))
def test_shift_invariance_of_null(c, seed):
    rng = np.random.default_rng(seed)
    m, z = match_from_sizes([(1, 1), (1, 3), (2, 2)])
    Y = rng.normal(size=z.size)
    plan = PermutationPlan(100, seed=seed % 1000)
    o1, n1 = permutation_distribution(None, Y, z, m, plan)
    o2, n2 = permutation_distribution(None, Y + c, z, m, plan)
    assert o2 == pytest.approx(o1, abs=1e-9 * max(1, abs(c)))
    np.testing.assert_allclose(n2, n1, atol=1e-9 * max(1, abs(c)))


def test_ci_covers_true_shift_and_shrinks(rng):
    m, z = match_from_sizes([(1, 1)] * 30)
    y_c = np.repeat(rng.normal(size=30), 2)
    widths = []
    for noise in (1.0, 0.1, 0.01):
        Y = y_c + 2 * z + noise * rng.normal(size=60)
        lo, hi = permutation_ci(None, Y, z, m, PermutationPlan(499, seed=2))
        assert lo <= 2 <= hi
        widths.append(hi - lo)
    assert widths[0] > widths[1] > widths[2]


def test_ci_level_zero_is_degenerate(rng):
    m, z = match_from_sizes([(1, 1)] * 10)
    Y = rng.normal(size=20)
    lo, hi = permutation_ci(None, Y, z, m, PermutationPlan(99), level=0.0)
    assert lo == hi
    assert abs(lo - matching_estimator(Y, z, m)) < 1e-9 + 0.1 * np.std(Y)


@pytest.mark.parametrize("seed", range(5))
def test_ci_monotone_in_level(seed):
    rng = np.random.default_rng(seed)
    m, z = match_from_sizes([(1, 2)] * 12)
    Y = rng.normal(size=36) + z
    plan = PermutationPlan(499, seed=seed)
    prev = None
    for level in (0.5, 0.8, 0.9, 0.95):
        lo, hi = permutation_ci(None, Y, z, m, plan, level=level)
        if prev is not None:
            assert lo <= prev[0] + 1e-12 and hi >= prev[1] - 1e-12
        prev = (lo, hi)


def test_ci_endpoints_invert_the_test(rng):
    m, z = match_from_sizes([(1, 1)] * 25)
    Y = rng.normal(size=50) + 0.5 * z
    plan = PermutationPlan(999, seed=0)
    lo, hi = permutation_ci(None, Y, z, m, plan)
    assert permutation_test(None, Y - lo * z, z, m, plan) > 0.05
    assert permutation_test(None, Y - hi * z, z, m, plan) > 0.05
    step = 0.01 * np.std(Y)
    assert permutation_test(None, Y - (lo - step) * z, z, m, plan) <= 0.05
    assert permutation_test(None, Y - (hi + step) * z, z, m, plan) <= 0.05


def test_reuse_refused():
    from rebar import MatchAssignment

    z = np.array([1, 1, 0])
    m = MatchAssignment(z=z, units=[0, 2, 1, 2], set_ids=[0, 0, 1, 1], allow_reuse=True)
    with pytest.raises(ValueError, match="reuse"):
        permutation_test(None, np.zeros(3), z, m)


def test_plan_validation():
    with pytest.raises(ValueError):
        PermutationPlan(n_perms=0)
    with pytest.raises(ValueError, match="exact_cap"):
        m, z = match_from_sizes([(1, 1)] * 12)
        permuted_assignments(m, z, PermutationPlan(EXACT, exact_cap=100))


def test_nominal_level_small_null(rng):
    # quick version of the acceptance check: 100 datasets x 199 draws
    m, z = match_from_sizes([(1, 2)] * 10)
    ps = [permutation_test(None, rng.normal(size=30), z, m, PermutationPlan(199, seed=k))
          for k in range(100)]
    assert np.mean(np.array(ps) <= 0.1) <= 0.1 + 3 * np.sqrt(0.09 / 100)
    assert min(ps) > 0
