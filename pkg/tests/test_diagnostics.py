import numpy as np
import pytest
from conftest import match_from_sizes
from hypothesis import given, settings
from hypothesis import strategies as st

from rebar import MatchSpec, ObservationalDataset, OutcomeBox, relax_match
from rebar.diagnostics import (
    augment_with_score,
    balance_report,
    omnibus_balance_test,
    proximal_validation,
    standardized_differences,
    yhat_balance,
)
from rebar.propensity import fit_propensity
from rebar.simulation import SimCell, gen_nonlinear


def test_std_diff_zero_and_one():
    z = np.array([1, 1, 0, 0])
    assert standardized_differences(np.array([1.0, 3, 1, 3]), z)[0].std_diff_unmatched == 0.0
    # both groups have SD sqrt(2); a gap of sqrt(2) is one pooled SD
    s2 = np.sqrt(2.0)
    x = np.array([s2 + 1, s2 - 1, 1.0, -1.0])
    assert standardized_differences(x, z)[0].std_diff_unmatched == pytest.approx(1.0)


def test_matched_std_diff_by_hand():
    # sets {T=5; C=1,3} and {T=4; C=1}; unit 5 is in the remnant
    z = np.array([1, 0, 0, 1, 0, 0])
    x = np.array([5.0, 1, 3, 4, 1, 9])
    labels = [0, 0, 0, 1, 1, -1]
    from rebar import MatchAssignment

    m = MatchAssignment.from_labels(labels, z)
    gap = 0.5 * (5 - 2) + 0.5 * (4 - 1)
    sp = np.sqrt((np.var(x[z == 1], ddof=1) + np.var(x[z == 0], ddof=1)) / 2)
    row = standardized_differences(x, z, m=m)[0]
    assert row.std_diff_matched == pytest.approx(gap / sp)


def test_omnibus_min_p_when_covariate_is_z(rng):
    z = np.r_[np.ones(20, int), np.zeros(40, int)]
    assert omnibus_balance_test(z.astype(float), z, n_perms=999) == pytest.approx(1 / 1000)


def test_omnibus_null_uniformity():
    hits = []
    for k in range(200):
        rng = np.random.default_rng(1000 + k)
        X = rng.normal(size=(60, 3))
        z = np.zeros(60, int)
        z[rng.choice(60, 20, replace=False)] = 1
        hits.append(omnibus_balance_test(X, z, n_perms=199, seed=k) <= 0.05)
    rate = np.mean(hits)
    assert abs(rate - 0.05) <= 3 * np.sqrt(0.05 * 0.95 / 200)


@settings(max_examples=25, deadline=None)
@given(st.floats(-1e3, 1e3), st.integers(0, 2**31 - 1))
def test_matched_omnibus_shift_invariant(c, seed):
    rng = np.random.default_rng(seed)
    m, z = match_from_sizes([(1, 2)] * 8)
    X = rng.normal(size=(z.size, 2))
    X2 = X.copy()
    X2[:, 1] += c
    a = omnibus_balance_test(X, z, m, n_perms=199, seed=1)
    b = omnibus_balance_test(X2, z, m, n_perms=199, seed=1)
    assert a == b


def test_yhat_balance_constant_and_sentinel():
    m, z = match_from_sizes([(1, 1)] * 30)
    d, p = yhat_balance(z, m, np.full(z.size, 3.0), n_perms=199)
    assert d == 0.0 and p == 1.0
    d, p = yhat_balance(z, m, z.astype(float), n_perms=199)
    assert p == pytest.approx(1 / 200)


def test_pvalues_in_unit_interval(rng):
    m, z = match_from_sizes([(1, 1)] * 10)
    X = rng.normal(size=(20, 2))
    for mm in (None, m):
        p = omnibus_balance_test(X, z, mm, n_perms=100)
        assert 0 < p <= 1


def test_balance_report_text_and_csv(tmp_path, rng):
    m, z = match_from_sizes([(1, 2)] * 10)
    ds = ObservationalDataset(X=rng.normal(size=(30, 3)), Z=z, Y=np.zeros(30))
    rep = balance_report(ds, m=m, n_perms=199)
    rep.to_csv(tmp_path / "b.csv")
    assert "x0" in rep.to_text()
    assert len(rep.to_dict()["rows"]) == 3


def _nonlinear_setup(seed=0):
    ds, truth = gen_nonlinear(SimCell(400, 50, 50, 0.0, 0.0), seed)
    logits = fit_propensity(ds, list(range(5))).logits
    m, big = relax_match(logits, ds.Z, MatchSpec("optimal_pair"), MatchSpec("optimal_ratio", 2))
    return ds, m, big


def test_proximal_validation_reads_remnant_only():
    ds, m, big = _nonlinear_setup()
    box = OutcomeBox(ds.Y)
    box.unlock("diagnostics")
    blind = ObservationalDataset(X=ds.X, Z=ds.Z, Y=np.zeros(ds.n))
    rep = proximal_validation(blind, m, big, ["ridge"], 5, 0, box=box)
    assert box.touched("diagnostics") <= set(m.remnant().tolist())
    assert rep.n_distal + rep.n_proximal == m.remnant().size


def test_proximal_validation_flags_sign_flip():
    ds, m, big = _nonlinear_setup(seed=1)
    rep = proximal_validation(ds, m, big, ["lasso"], 5, 0)
    assert rep.flagged
    assert rep.pv_r2 < rep.cv_r2


def test_proximal_validation_iid_no_large_gap():
    rng = np.random.default_rng(2)
    n = 400
    X = rng.normal(size=(n, 4))
    z = np.zeros(n, int)
    z[rng.choice(n, 30, replace=False)] = 1  # treatment independent of X
    y = X @ [1.0, -1, 0.5, 0] + rng.normal(size=n)
    ds = ObservationalDataset(X=X, Z=z, Y=y)
    logits = fit_propensity(ds, [0, 1]).logits
    m, big = relax_match(logits, z, MatchSpec("optimal_pair"), MatchSpec("optimal_ratio", 4))
    rep = proximal_validation(ds, m, big, ["ridge"], 5, 0)
    se = np.sqrt(2 / rep.n_proximal)  # rough sampling SD of R^2 on a small test set
    assert abs(rep.pv_r2 - rep.cv_r2) < 3 * se


def test_proximal_validation_empty_proximal_errors():
    ds, m, _ = _nonlinear_setup()
    with pytest.raises(ValueError, match="proximal set is empty"):
        proximal_validation(ds, m, m, ["ridge"])


def test_augment_with_score_shape():
    X = np.ones((4, 3))
    A = augment_with_score(X, np.zeros(4))
    assert A.shape == (4, 7)
    np.testing.assert_allclose(A[:, 3], 0.5)
