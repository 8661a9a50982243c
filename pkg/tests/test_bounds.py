import numpy as np
import pytest
from _oracles import expected_estimate, marginal_probs, random_tables
from conftest import match_from_sizes
from hypothesis import given, settings
from hypothesis import strategies as st

from rebar import bias_bound, bound_constant, gamma_multiplier, matching_bias


def _hand_c(sizes):
    n = sum(a + b for a, b in sizes)
    n_t = sum(a for a, _ in sizes)
    return n / n_t**2 * sum((a + b) * max(1.0, a / b) ** 2 for a, b in sizes)


def test_pairs_give_four():
    assert bound_constant(match_from_sizes([(1, 1)] * 7)[0]) == 4.0


def test_one_to_four():
    assert bound_constant(match_from_sizes([(1, 4)])[0]) == pytest.approx(25.0)


def test_mixed_sets_by_hand():
    # n = 5, n_T = 3: 5/9 * (2*1 + 3*4) = 70/9
    assert bound_constant(match_from_sizes([(1, 1), (2, 1)])[0]) == pytest.approx(70 / 9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=6))
def test_constant_formula(sizes):
    m, _ = match_from_sizes(sizes)
    if all(s == (1, 1) for s in sizes):
        assert bound_constant(m) == 4.0
    assert bound_constant(m) == pytest.approx(_hand_c(sizes))


def test_gamma_multiplier_values():
    assert gamma_multiplier(1) == 0.0
    assert gamma_multiplier(6) == pytest.approx(1.681, abs=1e-3)
    assert gamma_multiplier(3) == pytest.approx(1.072, abs=1e-3)
    assert gamma_multiplier(np.inf) == 4.0
    with pytest.raises(ValueError):
        gamma_multiplier(0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(1.0, 1e6), st.floats(1e-6, 10))
def test_gamma_multiplier_increasing(g, dg):
    assert gamma_multiplier(g + dg) > gamma_multiplier(g) or g + dg == g


def test_bias_bound_examples():
    m, _ = match_from_sizes([(1, 1)] * 3)
    assert bias_bound(m, 1.0).bound_abs_bias == pytest.approx(2.0)
    assert bias_bound(m, 1.0, gamma=6).bound_abs_bias == pytest.approx(np.sqrt(1.681), abs=1e-3)
    assert bias_bound(m, 0.0).bound_abs_bias == 0.0
    assert bias_bound(m, 1.0, sd_yc=4.0).bound_standardized == pytest.approx(0.5)
    with pytest.raises(ValueError):
        bias_bound(match_from_sizes([(1, 2)])[0], 1.0, gamma=2)


@pytest.mark.parametrize("seed", range(20))
def test_closed_form_bias_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    sizes = [(int(rng.integers(1, 3)), int(rng.integers(1, 3))) for _ in range(3)]
    tables = random_tables(sizes, rng)
    n = sum(a + b for a, b in sizes)
    v = rng.uniform(-10, 10, n)
    m, _ = match_from_sizes(sizes)
    got = matching_bias(m, v, marginal_probs(sizes, tables))
    assert abs(got - expected_estimate(sizes, tables, v)) < 1e-12


def test_matching_bias_rejects_bad_probabilities():
    m, _ = match_from_sizes([(1, 1)])
    with pytest.raises(ValueError):
        matching_bias(m, np.zeros(2), np.array([0.9, 0.9]))
