import numpy as np
import pytest

from rebar import MatchSpec, optimal_match
from rebar.propensity import fit_propensity
from rebar.simulation import (
    SimCell,
    SimConfig,
    SimConfigError,
    calibrate_intercept,
    gen_covariance,
    gen_linear,
    gen_nonlinear,
    run_replication,
    run_study,
)

SMALL = dict(n=120, p=12, target_n_t=20, n_runs=2)


def test_covariance_rho_zero_is_identity():
    ev = np.linalg.eigvalsh(gen_covariance(40, 0.0, seed=1))
    np.testing.assert_allclose(ev, 1.0, atol=1e-8)


def test_covariance_spectrum():
    ev = np.sort(np.linalg.eigvalsh(gen_covariance(50, 0.05, seed=2)))[::-1]
    np.testing.assert_allclose(ev, np.exp(-0.05 * np.arange(1, 51)), atol=1e-8)


def test_high_p_sampling_without_factorization():
    # smallest eigenvalue exp(-30) ~ 9.4e-14 would break a Cholesky factor
    assert np.exp(-0.05 * 600) == pytest.approx(9.4e-14, rel=1e-2)
    ds, _ = gen_linear(SimCell(50, 600, 10, 0.0, 0.05), seed=3)
    assert np.all(np.isfinite(ds.X))


def test_calibrate_intercept():
    lp = np.random.default_rng(0).normal(size=500)
    a = calibrate_intercept(lp, 0.125)
    assert abs(np.mean(1 / (1 + np.exp(-(a + lp)))) - 0.125) <= 1e-10


def test_kappa_zero_treatment_ignores_hidden_part():
    cors = []
    for s in range(30):
        ds, truth = gen_linear(SimCell(400, 30, 50, 0.0, 0.0), seed=s)
        hidden = ds.X[:, 5:] @ truth.beta
        cors.append(np.corrcoef(ds.Z, hidden)[0, 1])
    assert abs(np.mean(cors)) < 3 * np.std(cors) / np.sqrt(len(cors))


def test_beta_mean_and_treated_count():
    betas, n_ts = [], []
    for s in range(200):
        ds, truth = gen_linear(SimCell(400, 30, 50, 0.5, 0.0), seed=s)
        betas.append(truth.beta)
        n_ts.append(ds.n_treated)
    b = np.concatenate(betas)
    assert abs(b.mean() - 0.2) < 3 * b.std() / np.sqrt(b.size)
    n_ts = np.array(n_ts)
    assert abs(n_ts.mean() - 50) < 3 * np.sqrt(n_ts.var() / n_ts.size) + 0.5


def test_truth_consistency():
    for gen in (gen_linear, gen_nonlinear):
        ds, truth = gen(SimCell(200, 20, 30, 0.5, 0.05), seed=4)
        np.testing.assert_array_equal(ds.Y, np.where(ds.Z == 1, truth.y_T, truth.y_C))
        np.testing.assert_array_equal(truth.tau, 0.0)
        yhat = np.random.default_rng(0).normal(size=ds.n)
        np.testing.assert_array_equal((truth.y_T - yhat) - (truth.y_C - yhat), truth.tau)


def test_nonlinear_construction():
    cell = SimCell(400, 30, 50, 0.0, 0.0)
    for s in range(5):
        ds, truth = gen_nonlinear(cell, seed=s)
        assert ds.n_treated == 50
        t = truth.treatable
        xb_star = ds.X[:, :5].sum(axis=1) + ds.X[:, 5:] @ truth.beta
        before_negation = -truth.y_C
        assert np.corrcoef(xb_star[t], before_negation[t])[0, 1] < 0
        assert np.all(ds.Z[~t] == 0)


def test_nonlinear_remnant_has_both_regimes():
    ds, truth = gen_nonlinear(SimCell(400, 30, 50, 0.0, 0.0), seed=0)
    logits = fit_propensity(ds, list(range(5))).logits
    rem = optimal_match(logits, ds.Z, MatchSpec()).remnant()
    assert truth.treatable[rem].any() and (~truth.treatable[rem]).any()


def test_config_validation_names_field():
    with pytest.raises(SimConfigError) as info:
        SimConfig(kappa=(-1,))
    assert info.value.field == "kappa"
    with pytest.raises(SimConfigError, match="n_runs"):
        SimConfig(n_runs=0)


def test_grids():
    assert len(SimConfig().cells()) == 4
    assert len(SimConfig().estimators) == 9
    assert len(SimConfig.full_scale().cells()) == 9


def test_replication_rows_and_status():
    cfg = SimConfig(**SMALL, kappa=(0.5,), rho=(0.0,))
    rows = run_replication(cfg, 0, 0)
    assert len(rows) == 9
    assert all(r["status"] == "ok" for r in rows)
    assert {r["design"] for r in rows} == {"psm", "nn", "cem"}


def test_study_is_seed_deterministic(tmp_path):
    cfg = SimConfig(**SMALL, kappa=(0.5,), rho=(0.0, 0.05))
    run_study(cfg, out_dir=tmp_path / "a")
    run_study(cfg, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "results.csv").read_bytes() == \
        (tmp_path / "b" / "results.csv").read_bytes()
    assert (tmp_path / "a" / "summary.csv").read_bytes() == \
        (tmp_path / "b" / "summary.csv").read_bytes()


def test_summary_shape():
    cfg = SimConfig(**SMALL)
    _, summary = run_study(cfg)
    assert len(summary) == 4 * 9
    for col in ("bias", "rmse", "mcse_bias", "mean_cv_r2"):
        assert col in summary


def test_nonlinear_rows():
    cfg = SimConfig(**SMALL, scenario="nonlinear", kappa=(0.0,), rho=(0.0,), rf_trees=20)
    rows = run_replication(cfg, 0, 0)
    assert [r["estimator"] for r in rows] == ["matching", "rebar_lasso", "rebar_random_forest"]
    lasso = rows[1]
    assert "pv_flag" in lasso and "treatable_in_remnant" in lasso
