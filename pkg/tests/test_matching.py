import numpy as np
import pytest
from _oracles import brute_force_pair_cost, brute_force_ratio_cost, nearest_scan
from hypothesis import given, settings
from hypothesis import strategies as st

from rebar import (
    InfeasibleMatchError,
    MatchAssignment,
    MatchSpec,
    coarsened_exact_match,
    effective_sample_size,
    nearest_neighbor_match,
    optimal_match,
    relax_match,
)
from rebar.matching import read_match_csv, total_distance, write_match_csv


def _pairs(m):
    return sorted((int(t[0]), int(c[0])) for t, c in m.sets())


def test_unique_optimum():
    logits = np.array([0.1, 0.9, 0.2, 0.8])
    z = np.array([1, 1, 0, 0])
    m = optimal_match(logits, z)
    assert _pairs(m) == [(0, 2), (1, 3)]
    assert total_distance(m, logits) == pytest.approx(0.2)


def test_greedy_trap():
    logits = np.array([0.3, 0.5, 0.4, 1.0])
    z = np.array([1, 1, 0, 0])
    m = optimal_match(logits, z)
    assert _pairs(m) == [(0, 2), (1, 3)]
    assert total_distance(m, logits) == pytest.approx(0.6)


def _instance(rng, n_t, n_c):
    logits = rng.normal(size=n_t + n_c)
    z = np.r_[np.ones(n_t, int), np.zeros(n_c, int)]
    return logits, z


@pytest.mark.parametrize("seed", range(40))
def test_pair_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n_t = int(rng.integers(1, 8))
    n_c = int(rng.integers(n_t, 11))
    logits, z = _instance(rng, n_t, n_c)
    m = optimal_match(logits, z)
    assert total_distance(m, logits) == pytest.approx(
        brute_force_pair_cost(logits[:n_t], logits[n_t:]), abs=1e-12)


@pytest.mark.parametrize("seed", range(15))
def test_ratio_matches_brute_force(seed):
    rng = np.random.default_rng(100 + seed)
    n_t = int(rng.integers(1, 4))
    n_c = int(rng.integers(n_t + 1, 7))
    cap = int(rng.integers(2, 4))
    k = int(rng.integers(n_t, min(n_c, cap * n_t) + 1))
    logits, z = _instance(rng, n_t, n_c)
    m = optimal_match(logits, z, MatchSpec("optimal_ratio", cap, total_controls=k))
    assert total_distance(m, logits) == pytest.approx(
        brute_force_ratio_cost(logits[:n_t], logits[n_t:], cap, k), abs=1e-12)


def test_nearest_neighbor_examples():
    m = nearest_neighbor_match(np.array([0.5, 0.4, 0.7]), np.array([1, 0, 0]))
    assert _pairs(m) == [(0, 1)]
    m = nearest_neighbor_match(np.array([0.1, 0.2, 0.15, 5.0]), np.array([1, 1, 0, 0]))
    assert _pairs(m) == [(0, 2), (1, 2)]
    assert m.has_reuse


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_nearest_neighbor_agrees_with_scan(n_t, n_c, seed):
    rng = np.random.default_rng(seed)
    logits = np.round(rng.normal(size=n_t + n_c), 1)  # rounding creates ties
    z = np.r_[np.ones(n_t, int), np.zeros(n_c, int)]
    m = nearest_neighbor_match(logits, z)
    got = [int(c[0]) - n_t for _, c in m.sets()]
    assert got == nearest_scan(logits[:n_t], logits[n_t:])


def test_cem_examples():
    m = coarsened_exact_match(np.array([0.1, 0.15, 0.9]), np.array([1, 0, 0]), bins=2)
    assert m.n_sets == 1
    np.testing.assert_array_equal(m.remnant(), [2])
    m = coarsened_exact_match(np.ones((5, 2)), np.array([1, 0, 1, 0, 0]))
    assert m.n_sets == 1 and m.units.size == 5


def test_cem_drops_lonely_treated():
    m = coarsened_exact_match(np.array([0.0, 0.05, 1.0]), np.array([1, 0, 1]), bins=2)
    np.testing.assert_array_equal(m.dropped_treated, [2])
    assert m.estimand_changed


def test_effective_sample_size():
    assert effective_sample_size(MatchAssignment.from_labels([0] * 5, [1, 0, 0, 0, 0])) == \
        pytest.approx(1.6)
    assert effective_sample_size(MatchAssignment.from_labels([0, 0], [1, 0])) == 1.0
    m = MatchAssignment.from_labels([0, 0, 1, 1, 1, 1, 1], [1, 0, 1, 0, 0, 0, 0])
    assert effective_sample_size(m) == pytest.approx(1.0 + 1.6)


def test_relax_same_spec_gives_empty_proximal():
    rng = np.random.default_rng(3)
    logits, z = _instance(rng, 4, 12)
    spec = MatchSpec("optimal_ratio", 2)
    a, b = relax_match(logits, z, spec, spec)
    np.testing.assert_array_equal(a.matched_units(), b.matched_units())


def test_relax_caliper_geometry():
    # treated at 0; controls at 0.1, 0.25, 0.6; caliper 0.15 -> 0.3 picks up 0.25
    logits = np.array([0.0, 0.1, 0.25, 0.6])
    z = np.array([1, 0, 0, 0])
    base, big = relax_match(logits, z, MatchSpec("optimal_ratio", 3, caliper=0.15),
                            MatchSpec("optimal_ratio", 3, caliper=0.3))
    np.testing.assert_array_equal(base.matched_units(), [0, 1])
    proximal = np.setdiff1d(big.matched_units(), base.matched_units())
    np.testing.assert_array_equal(proximal, [2])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31 - 1), st.integers(1, 3), st.integers(1, 3))
def test_relaxation_is_monotone(n_t, seed, cap, extra):
    rng = np.random.default_rng(seed)
    logits, z = _instance(rng, n_t, n_t * (cap + extra) + 2)
    base, big = relax_match(logits, z, MatchSpec("optimal_ratio", cap),
                            MatchSpec("optimal_ratio", cap + extra))
    assert set(base.matched_units()) <= set(big.matched_units())


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1), st.floats(0.05, 2.0))
def test_caliper_respected_and_no_reuse(n_t, seed, caliper):
    rng = np.random.default_rng(seed)
    logits, z = _instance(rng, n_t, 3 * n_t + 3)
    try:
        m = optimal_match(logits, z, MatchSpec("optimal_ratio", 2, caliper=caliper))
    except InfeasibleMatchError as exc:
        assert "caliper" in str(exc) or "cannot" in str(exc) or "feasible" in str(exc)
        return
    for t, c in m.sets():
        assert np.all(np.abs(logits[t][:, None] - logits[c][None, :]) <= caliper + 1e-12)
    assert not m.has_reuse


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_optimal_beats_greedy(n_t, seed):
    rng = np.random.default_rng(seed)
    logits, z = _instance(rng, n_t, n_t + 4)
    m = optimal_match(logits, z)
    used, greedy = set(), 0.0
    for t in range(n_t):
        d = [(abs(logits[t] - logits[j]), j) for j in range(n_t, z.size) if j not in used]
        best = min(d)
        used.add(best[1])
        greedy += best[0]
    assert total_distance(m, logits) <= greedy + 1e-12


def test_infeasible_caliper_names_units():
    logits = np.array([0.0, 5.0, 0.05])
    z = np.array([1, 1, 0])
    with pytest.raises(InfeasibleMatchError) as info:
        optimal_match(logits, z, MatchSpec(caliper=0.1))
    assert info.value.unmatchable == [1]


def test_deterministic_ties():
    logits = np.array([0.0, 1.0, 1.0, -1.0])
    z = np.array([1, 0, 0, 0])
    a = optimal_match(logits, z)
    b = optimal_match(logits, z)
    assert _pairs(a) == _pairs(b)


def test_match_csv_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    logits, z = _instance(rng, 3, 8)
    m = optimal_match(logits, z, MatchSpec("optimal_ratio", 2))
    write_match_csv(m, tmp_path / "m.csv")
    back = read_match_csv(tmp_path / "m.csv", z)
    np.testing.assert_array_equal(back.units, m.units)
    np.testing.assert_array_equal(back.set_ids, m.set_ids)
