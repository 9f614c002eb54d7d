import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

import somala_harness
from somala_harness import (
    AVERAGE_BLOCK,
    CandidateRun,
    TuneSpec,
    ae,
    ae_all,
    block_average,
    replicate,
    trajectory_records,
    tune,
)
from somala_models import (
    DataValidationError,
    EstimationError,
    M2PLModel,
    MultilevelLogisticModel,
    SimSetting,
    build_model,
    chol_entries,
    cholesky_factor,
    get_setting,
    initial_values,
    simulate_dataset,
    true_parameters,
)
from somala_optimizer import OptimizerConfig, StopRule, config_for_algorithm, run
from somala_samplers import SamplerConfig

TINY_MULTILEVEL = SimSetting(name="tiny-multilevel", model="multilevel", n_obs=60, n_items=4, n_factors=2,
                             mu=[0.3, 1.0], sigma_diag=0.1, sigma_offdiag=0.05)
TINY_M2PL = SimSetting(name="tiny-m2pl", model="m2pl", n_obs=60, n_items=9, n_factors=2,
                       sigma_diag=1.0, sigma_offdiag=0.5)


def _short(**values) -> OptimizerConfig:
    values.setdefault("max_epochs", 2)
    values.setdefault("stop", StopRule(enabled=False))
    return OptimizerConfig(**values)


# ---------------------------------------------------------------------------
# Absolute errors
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["multilevel-k5", "m2pl-k5"])
def test_ae_of_truth_is_zero(name):
    model, beta = true_parameters(get_setting(name))
    values = ae_all(beta, beta, model)
    assert all(v == 0.0 for v in values.values())
    assert list(values) == list(somala_harness.AE_BLOCKS[model.kind]) + [AVERAGE_BLOCK]


def test_multilevel_sigma_offset():
    model = MultilevelLogisticModel(2)
    sigma = np.array([[0.1, 0.05], [0.05, 0.1]])
    truth = model.make_params({"mu": [0.3, 1.0], "chol": chol_entries(cholesky_factor(sigma))})
    estimate = model.make_params({"mu": [0.3, 1.0], "chol": chol_entries(cholesky_factor(sigma + 0.01))})
    assert ae(estimate, truth, "sigma", model) == pytest.approx(0.01, abs=1e-12)
    assert ae(estimate, truth, "mu", model) == 0.0


def test_m2pl_sigma_uses_off_diagonal():
    model = M2PLModel(np.ones((1, 2), dtype=int))

    def params(rho):
        L = cholesky_factor(np.array([[1.0, rho], [rho, 1.0]]))
        return model.make_params({"d": [0.0], "a": [1.0, 1.0], "chol": chol_entries(L)})

    assert ae(params(0.6), params(0.5), "sigma", model) == pytest.approx(0.1, abs=1e-12)


def test_one_factor_m2pl_sigma_error_is_zero():
    model = M2PLModel(np.ones((2, 1), dtype=int))
    beta = model.make_params({"d": [0.0, 1.0], "a": [1.0, 2.0], "chol": [1.0]})
    assert ae(beta, beta.with_values(beta.values + 0.5), "sigma", model) == 0.0


def test_block_average():
    assert block_average({"d": 0.1, "a": 0.2, "sigma": 0.3}) == pytest.approx(0.2)
    assert block_average({"mu": 0.1, "sigma": 0.3, AVERAGE_BLOCK: 9.0}) == pytest.approx(0.2)


def test_ae_needs_shared_layout():
    model_a = MultilevelLogisticModel(2)
    model_b = MultilevelLogisticModel(3)
    with pytest.raises(DataValidationError):
        ae(model_a.make_params({"mu": [0, 0], "chol": [1, 0, 1]}),
           model_b.make_params({"mu": [0, 0, 0], "chol": [1, 0, 1, 0, 0, 1]}), "mu", model_a)


# ---------------------------------------------------------------------------
# Tuning
# ---------------------------------------------------------------------------

def _fake_candidates(monkeypatch, scores):
    def fake(dataset, init, config, value, tail_epochs):
        score = scores[value]
        return CandidateRun(value, score, None if score is not None else "diverged")
    monkeypatch.setattr(somala_harness, "_run_candidate", fake)


def test_single_candidate_is_returned(monkeypatch):
    _fake_candidates(monkeypatch, {0.3: 123.0})
    result = tune(None, None, OptimizerConfig(), TuneSpec(candidates=[0.3], tune_epochs=5, tail_epochs=2))
    assert result.chosen == 0.3


def test_ties_go_to_smaller_value(monkeypatch):
    _fake_candidates(monkeypatch, {0.05: 10.0, 0.1: 10.0, 0.2: 11.0})
    result = tune(None, None, OptimizerConfig(), TuneSpec(candidates=[0.2, 0.1, 0.05], tune_epochs=5, tail_epochs=2))
    assert result.chosen == 0.05
    assert list(result.table()["candidate"]) == [0.05, 0.1, 0.2]


def test_diverged_candidates_are_skipped(monkeypatch):
    _fake_candidates(monkeypatch, {0.01: None, 0.2: 50.0})
    result = tune(None, None, OptimizerConfig(), TuneSpec(candidates=[0.01, 0.2], tune_epochs=5, tail_epochs=2))
    assert result.chosen == 0.2
    assert list(result.table()["status"]) == ["diverged", "ok"]


def test_all_candidates_diverged(monkeypatch):
    _fake_candidates(monkeypatch, {0.1: None})
    with pytest.raises(EstimationError):
        tune(None, None, OptimizerConfig(), TuneSpec(candidates=[0.1], tune_epochs=5, tail_epochs=2))


def test_tune_spec_validation():
    assert TuneSpec().resolved_candidates("mala") == [0.01, 0.05, 0.1, 0.2]
    assert TuneSpec().resolved_candidates("rwmh") == [0.1, 0.2, 0.3, 0.4]
    with pytest.raises(ValidationError):
        TuneSpec(tune_epochs=5, tail_epochs=6)
    with pytest.raises(ValidationError):
        TuneSpec(candidates=[0.1, -0.2])


def test_tune_is_deterministic():
    dataset, _, xi_true = simulate_dataset(TINY_MULTILEVEL, 2)
    model = build_model(dataset)
    init = initial_values(model, dataset, 2, "simulation", true_xi=xi_true)
    spec = TuneSpec(candidates=[0.05, 0.2], tune_epochs=3, tail_epochs=2)
    first = tune(dataset, init, OptimizerConfig(seed=2), spec)
    second = tune(dataset, init, OptimizerConfig(seed=2), spec)
    assert first.chosen in (0.05, 0.2)
    assert first.chosen == second.chosen
    assert first.scores == second.scores
    assert first.best.beta is not None


# ---------------------------------------------------------------------------
# Replications
# ---------------------------------------------------------------------------

def test_single_replication_equals_run_trace():
    config = _short(sampler=SamplerConfig(kind="rwmh"))
    report = replicate(TINY_MULTILEVEL, [("d-somh", config)], 1, seed=5)

    dataset, beta_true, xi_true = simulate_dataset(TINY_MULTILEVEL, 5)
    model = build_model(dataset)
    init = initial_values(model, dataset, 5, "simulation", true_xi=xi_true)
    result = run(dataset, init, config.model_copy(update={"seed": 5}), model=model)
    expected = pd.DataFrame(trajectory_records(result, beta_true, model, "d-somh", 0))
    np.testing.assert_allclose(report.records.sort_values(["epoch", "block"])["ae"].to_numpy(),
                               expected.sort_values(["epoch", "block"])["ae"].to_numpy(), rtol=1e-12)
    assert report.failures == []


def test_algorithms_share_initial_error():
    algorithms = [("d-somala", _short(batch_size=20)), ("somh", _short(sampler=SamplerConfig(kind="rwmh")))]
    report = replicate(TINY_M2PL, algorithms, 2, seed=1)
    start = report.records[report.records["epoch"] == 0]
    by_algo = {name: part.sort_values(["replication", "block"])["ae"].to_numpy()
               for name, part in start.groupby("algorithm")}
    np.testing.assert_array_equal(by_algo["d-somala"], by_algo["somh"])

    frames = report.to_frames()
    assert list(frames) == ["d", "a", "sigma", AVERAGE_BLOCK]
    for table in frames.values():
        assert list(table.index) == ["d-somala", "somh"]
        assert list(table.columns) == [0, 1, 2]
    average = frames[AVERAGE_BLOCK]
    blocks = (frames["d"] + frames["a"] + frames["sigma"]) / 3
    np.testing.assert_allclose(average.to_numpy(), blocks.to_numpy(), rtol=1e-12)


def test_mae_ignores_replication_order():
    algorithms = [("d-somala", _short(batch_size=20))]
    forward = replicate(TINY_MULTILEVEL, algorithms, 2, seeds=[3, 4])
    backward = replicate(TINY_MULTILEVEL, algorithms, 2, seeds=[4, 3])
    np.testing.assert_allclose(forward.mae()["mae"].to_numpy(), backward.mae()["mae"].to_numpy(), rtol=1e-12)


def test_failed_runs_are_reported():
    algorithms = [("ok", _short()), ("explodes", _short(sampler=SamplerConfig(h=1e9)))]
    report = replicate(TINY_MULTILEVEL, algorithms, 1, seed=0)
    assert [f["algorithm"] for f in report.failures] == ["explodes"]
    assert set(report.records["algorithm"]) == {"ok"}
    assert list(report.to_frames()[AVERAGE_BLOCK].index) == ["ok"]


def test_report_views():
    report = replicate(TINY_MULTILEVEL, [("d-somala", _short(batch_size=20))], 1, seed=0)
    reached = report.epochs_to_reach(threshold=10.0)
    assert reached["epoch"].tolist() == [0.0]
    never = report.epochs_to_reach(threshold=-1.0)
    assert np.isnan(never["epoch"]).all()
    timed = report.mae_by_time([0.0, 1e6])
    assert list(timed[AVERAGE_BLOCK].columns) == [0.0, 1e6]


def test_run_timings_and_seeds():
    algorithms = [("ok", _short()), ("explodes", _short(sampler=SamplerConfig(h=1e9)))]
    report = replicate(TINY_MULTILEVEL, algorithms, 2, seeds=[7, 9])
    assert report.seeds == [7, 9]
    assert report.runs["algorithm"].tolist() == ["ok", "ok"]
    assert report.runs["seed"].tolist() == [7, 9]
    assert (report.runs["seconds"] > 0).all()
    assert report.wall_seconds >= report.runs["seconds"].sum()

    summary = report.timing_summary()
    assert summary["algorithm"].tolist() == ["ok"]
    assert summary["runs"].tolist() == [2]
    assert summary["min_seconds"].iloc[0] <= summary["mean_seconds"].iloc[0] <= summary["max_seconds"].iloc[0]

    grid = report.time_grid(3)
    assert grid[0] == 0.0
    assert grid[-1] == report.runs["seconds"].min()
    timed = report.mae_by_time(grid)[AVERAGE_BLOCK]
    np.testing.assert_allclose(timed[0.0].to_numpy(), report.to_frames()[AVERAGE_BLOCK][0].to_numpy(), rtol=1e-12)


def test_replicate_validates_inputs():
    with pytest.raises(DataValidationError):
        replicate(TINY_MULTILEVEL, [("a", _short()), ("a", _short())], 1)
    with pytest.raises(DataValidationError):
        replicate(TINY_MULTILEVEL, [("a", _short())], 2, seeds=[1])
    with pytest.raises(DataValidationError):
        replicate(TINY_MULTILEVEL, [], 1)


# ---------------------------------------------------------------------------
# Study reproductions
# ---------------------------------------------------------------------------

def _study_config(algorithm: str, setting: SimSetting, step: float, **overrides) -> OptimizerConfig:
    overrides.setdefault("stop", StopRule(enabled=False))
    return config_for_algorithm(algorithm, setting.model, setting.n_obs, batch_size=250, step=step, **overrides)


@pytest.mark.slow
def test_multilevel_k5_study_reaches_small_mae():
    setting = get_setting("multilevel-k5", n_obs=2000)
    config = _study_config("d-somala", setting, 0.05, max_epochs=1500, averaging_start_epoch=500)
    report = replicate(setting, [("D-SOMALA n=250", config)], 10, seed=100, workers=4)
    assert report.failures == []
    final = report.to_frames()[AVERAGE_BLOCK].iloc[:, -1]
    assert final.loc["D-SOMALA n=250"] <= 0.030


@pytest.mark.slow
def test_mala_reaches_threshold_before_random_walk():
    setting = get_setting("multilevel-k10", n_obs=2000)
    algorithms = [("D-SOMALA n=250", _study_config("d-somala", setting, 0.05, max_epochs=300)),
                  ("D-SOMH n=250", _study_config("d-somh", setting, 0.1, max_epochs=300))]
    report = replicate(setting, algorithms, 10, seed=200, workers=4)
    reached = report.epochs_to_reach(0.05).fillna(np.inf)
    epochs = reached.pivot(index="replication", columns="algorithm", values="epoch")
    assert np.isfinite(epochs["D-SOMALA n=250"]).all()
    assert (epochs["D-SOMALA n=250"] < epochs["D-SOMH n=250"]).sum() >= 9
