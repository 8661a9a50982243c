import numpy as np
import pytest

from rebar import LeakageError, RemnantPrediction
from rebar.analysis import EmptyRemnantError, RebarAnalysis
from rebar.simulation import SimCell, gen_linear


@pytest.fixture(scope="module")
def null_data():
    return gen_linear(SimCell(300, 20, 40, 0.0, 0.0), seed=5)[0]


def _analysis(**kw):
    base = dict(match_covariates=["x1", "x2", "x3", "x4", "x5"], learners=("lasso",),
                n_perms=499)
    base.update(kw)
    return RebarAnalysis(**base)


def test_null_run_covers_zero(null_data):
    a = _analysis().fit_dataset(null_data)
    rebar = a.reports_[1]
    assert rebar.ci[0] <= 0 <= rebar.ci[1]
    assert a.bounds_ and a.bounds_[0].label == "assumption-based"


def test_zero_learner_reproduces_matching(null_data):
    a = _analysis(learners=("zero",)).fit_dataset(null_data)
    assert a.reports_[0].point == a.reports_[1].point


def test_table_shape(null_data):
    a = _analysis().fit_dataset(null_data)
    lines = a.summary_table().splitlines()
    assert lines[0].split() == ["Estimate", "SE", "p-value", "95%", "CI"]
    assert lines[1].startswith("Matching") and lines[2].startswith("Rebar")


def test_poisoned_predictions_raise(null_data):
    pred = RemnantPrediction(np.zeros(null_data.n), np.arange(null_data.n))
    with pytest.raises(LeakageError):
        _analysis().fit_dataset(null_data, predictions=pred)


def test_outcomes_of_matched_units_unread_before_estimation(null_data, monkeypatch):
    from rebar import data as data_mod

    seen = {}
    orig = data_mod.OutcomeBox.take

    def spy(self, idx):
        seen.setdefault(self.stage, set()).update(np.asarray(idx).tolist())
        return orig(self, idx)

    monkeypatch.setattr(data_mod.OutcomeBox, "take", spy)
    a = _analysis(max_controls=2, relax_max_controls=4).fit_dataset(null_data)
    matched = set(a.match_.matched_units().tolist())
    for stage in ("learner", "diagnostics"):
        assert not (seen.get(stage, set()) & matched)
    assert seen["estimation"] >= matched


def test_nn_and_cem(null_data):
    for method in ("nn", "cem"):
        a = _analysis(method=method, bins=3).fit_dataset(null_data)
        assert len(a.reports_) == 2


def test_empty_remnant_raises():
    X = np.arange(6.0)[:, None]
    z = np.array([1, 0, 1, 0, 1, 0])
    with pytest.raises(EmptyRemnantError):
        RebarAnalysis(match_covariates=[0], learners=("grand_mean",), n_perms=99).fit(
            X, z, np.zeros(6))


def test_to_dict_has_sections(null_data):
    d = _analysis().fit_dataset(null_data).to_dict()
    for key in ("match", "balance", "yhat_balance", "learner", "estimates"):
        assert key in d
