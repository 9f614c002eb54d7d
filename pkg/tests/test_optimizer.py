from itertools import combinations

import numpy as np
import pytest
from pydantic import ValidationError

from somala_config import ALGORITHM_PRESETS, STUDY_ALGORITHMS
from somala_estimators import quadrature_loglik_1d, quadrature_mmle_1d
from somala_models import (
    DataValidationError,
    Dataset,
    MultilevelLogisticModel,
    NumericalDivergenceError,
    SimSetting,
    build_model,
    chol_entries,
    initial_values,
    simulate_dataset,
)
from somala_optimizer import (
    DiffMaxMonitor,
    OptimizerConfig,
    PolyakRuppertAverager,
    QNState,
    StopRule,
    config_for_algorithm,
    diff_max_monitor,
    hessian_diag_rows,
    minibatch_sg,
    qn_update,
    run,
    sg_update,
    step_schedule,
)
from somala_samplers import SamplerConfig
from tests.conftest import make_m2pl, make_multilevel


# ---------------------------------------------------------------------------
# Step sizes
# ---------------------------------------------------------------------------

def test_first_step_is_one():
    assert step_schedule(1, 7, 100, 0.51) == 1.0


def test_step_decays_after_an_epoch_of_updates():
    assert [step_schedule(c, 1000, 10_000, 0.51) for c in range(1, 11)] == [1.0] * 10
    assert step_schedule(11, 1000, 10_000, 0.51) == pytest.approx(2 ** -0.51)


def test_fullbatch_step():
    assert step_schedule(4, 50, 50, 0.51) == pytest.approx(4 ** -0.51)
    assert step_schedule(4, 50, 50, 0.51, scale=0.5) == pytest.approx(0.5 * 4 ** -0.51)


def test_step_counter_starts_at_one():
    with pytest.raises(ValueError):
        step_schedule(0, 10, 100, 0.51)


# ---------------------------------------------------------------------------
# Stochastic gradients
# ---------------------------------------------------------------------------

def test_minibatch_scaling(rng):
    dataset, model, beta, xi = make_m2pl(rng, n_obs=2)
    prep = model.prepare(beta)
    single = model.grad_params(prep, xi[0], dataset, [0])[0]
    np.testing.assert_array_equal(minibatch_sg(beta, xi, dataset, [0], model), 2.0 * single)
    full = model.grad_params(prep, xi, dataset).sum(axis=0)
    np.testing.assert_array_equal(minibatch_sg(beta, xi, dataset, [0, 1], model), full)


@pytest.mark.parametrize("make", [make_m2pl, make_multilevel])
def test_minibatch_gradient_is_unbiased_over_all_subsets(make, rng):
    dataset, model, beta, xi = make(rng, n_obs=6)
    full = minibatch_sg(beta, xi, dataset, np.arange(6), model)
    subsets = list(combinations(range(6), 2))
    assert len(subsets) == 15
    mean = np.mean([minibatch_sg(beta, xi, dataset, list(s), model) for s in subsets], axis=0)
    np.testing.assert_allclose(mean, full, rtol=1e-12, atol=1e-12)


def test_empty_minibatch(m2pl_instance):
    dataset, model, beta, xi = m2pl_instance
    with pytest.raises(DataValidationError):
        minibatch_sg(beta, xi, dataset, [], model)


def test_zero_gradient_only_projects(m2pl_instance):
    _, model, beta, _ = m2pl_instance
    values = beta.values.copy()
    values[model.layout.slice("chol")] *= 2.0
    off = beta.with_values(values)
    updated = sg_update(off, np.zeros(model.n_params), 0.7, None, None, model)
    np.testing.assert_array_equal(updated.values, model.project(off).values)


def test_plain_ascent_step(multilevel_instance, rng):
    _, model, beta, _ = multilevel_instance
    grad = rng.normal(size=model.n_params)
    updated = sg_update(beta, grad, 1.0, None, None, model)
    np.testing.assert_array_equal(updated.values, beta.values + grad)


def test_scaled_ascent_step(multilevel_instance, rng):
    _, model, beta, _ = multilevel_instance
    grad = rng.normal(size=model.n_params)
    state = QNState(np.full(model.n_params, 2.0))
    updated = sg_update(beta, grad, 1.0, state, {"sigma": 0.05}, model)
    expected_step = grad / 2.0
    expected_step[model.layout.slice("chol")] *= 0.05
    np.testing.assert_allclose(updated.values, beta.values + expected_step, rtol=1e-14, atol=1e-14)


def test_update_keeps_unit_rows(m2pl_instance, rng):
    _, model, beta, _ = m2pl_instance
    updated = sg_update(beta, 5 * rng.normal(size=model.n_params), 0.9, None, None, model)
    np.testing.assert_allclose(np.diag(model.sigma(updated)), 1.0, atol=1e-10)


def test_radial_chol_gradient_does_not_move_rows(m2pl_instance):
    _, model, beta, _ = m2pl_instance
    grad = np.zeros(model.n_params)
    grad[model.layout.slice("chol")] = -10.0 * chol_entries(model.chol_of(beta))
    state = QNState(np.full(model.n_params, 1e-2))
    updated = sg_update(beta, grad, 1.0, state, None, model)
    np.testing.assert_allclose(updated.values, beta.values, atol=1e-10)


def test_large_chol_step_keeps_diagonal_signs(m2pl_instance, rng):
    _, model, beta, _ = m2pl_instance
    state = QNState(np.full(model.n_params, 1e-2))
    current = beta
    for _ in range(20):
        current = sg_update(current, 50 * rng.normal(size=model.n_params), 1.0, state, None, model)
        L = model.chol_of(current)
        assert L[0, 0] == 1.0
        assert (np.diag(L) > 0).all()
        assert model.constraint_violation(current) < 1e-10


def test_tangent_step_keeps_multilevel_steps(multilevel_instance, rng):
    _, model, beta, _ = multilevel_instance
    step = rng.normal(size=model.n_params)
    np.testing.assert_array_equal(model.tangent_step(beta, step), step)


def test_non_finite_update_diverges(multilevel_instance):
    _, model, beta, _ = multilevel_instance
    grad = np.zeros(model.n_params)
    grad[0] = np.inf
    with pytest.raises(NumericalDivergenceError):
        sg_update(beta, grad, 1.0, None, None, model)


# ---------------------------------------------------------------------------
# Quasi-Newton scaling
# ---------------------------------------------------------------------------

def test_qn_fixed_point(multilevel_instance):
    dataset, model, beta, xi = multilevel_instance
    rows = np.arange(8)
    prep = model.prepare(beta)
    d_diag = np.ones(model.n_params)
    d_diag[model.layout.slice("mu")] = np.diag(prep.sigma_inv)
    updated = qn_update(QNState(d_diag), beta, xi[rows], dataset, rows, 0.7, model,
                        scale=1.0 / rows.size, method="analytic")
    np.testing.assert_allclose(updated.d_diag[model.layout.slice("mu")], np.diag(prep.sigma_inv),
                               rtol=1e-12)


def test_qn_floor(multilevel_instance):
    dataset, model, beta, xi = multilevel_instance
    rows = np.arange(8)
    target = -hessian_diag_rows(model, beta, xi[rows], dataset, rows, "analytic").mean(axis=0)
    updated = qn_update(QNState.initial(model.n_params), beta, xi[rows], dataset, rows, 1.0, model,
                        scale=1.0 / rows.size, method="analytic", floor=0.5)
    np.testing.assert_allclose(updated.d_diag, np.maximum(target, 0.5), rtol=1e-12, atol=1e-15)
    assert (updated.d_diag >= 0.5).all()


def test_qn_converges_to_constant_hessian(rng):
    dataset, model, beta, xi = make_multilevel(rng, n_obs=10, n_factors=3)
    rows = np.arange(10)
    state = QNState.initial(model.n_params)
    for t in range(1, 1001):
        state = qn_update(state, beta, xi, dataset, rows, t ** -0.51, model, scale=0.1, method="analytic")
    expected = np.diag(model.prepare(beta).sigma_inv)
    np.testing.assert_allclose(state.d_diag[model.layout.slice("mu")], expected, atol=1e-3)


def test_qn_diagonal_tied_within_rows(m2pl_instance):
    dataset, model, beta, xi = m2pl_instance
    rows = np.arange(6)
    state = qn_update(QNState.initial(model.n_params), beta, xi[rows], dataset, rows, 0.5, model)
    chol = state.d_diag[model.layout.slice("chol")]
    # K = 3: rows hold entries [0], [1, 2], [3, 4, 5]
    assert chol[1] == chol[2]
    assert chol[3] == chol[4] == chol[5]


# ---------------------------------------------------------------------------
# Averaging and stopping
# ---------------------------------------------------------------------------

def test_diff_max_arithmetic():
    values, fired = diff_max_monitor([np.zeros(2), np.array([0.03, -0.07])], StopRule())
    assert values == [pytest.approx(0.07)]
    assert not fired


def test_diff_max_fires_on_constant_trajectory():
    rule = StopRule(consecutive=10)
    window = np.array([0.4, -1.2])
    values, fired = diff_max_monitor([window] * 11, rule)
    assert values == [0.0] * 10
    assert fired
    _, fired_early = diff_max_monitor([window] * 10, rule)
    assert not fired_early


def test_diff_max_never_fires_above_threshold():
    windows = [np.array([0.06 * (k % 2)]) for k in range(40)]
    values, fired = diff_max_monitor(windows, StopRule(threshold=0.05, consecutive=2))
    assert not fired
    assert min(values) == pytest.approx(0.06)


def test_diff_max_compares_first_window_with_initial():
    values, _ = diff_max_monitor([np.array([0.2])], StopRule(), initial=np.array([0.0]))
    assert values == [pytest.approx(0.2)]


def test_monitor_averages_within_windows():
    monitor = DiffMaxMonitor(StopRule(window_w=2), np.zeros(1))
    assert monitor.update(np.array([1.0])) is None
    assert monitor.update(np.array([3.0])) == pytest.approx(2.0)


def test_polyak_ruppert_average_is_projected(m2pl_instance, rng):
    _, model, beta, _ = m2pl_instance
    averager = PolyakRuppertAverager(model)
    assert averager.result(beta) is beta
    betas = [sg_update(beta, rng.normal(size=model.n_params), 0.5, None, None, model) for _ in range(4)]
    for b in betas:
        averager.update(b)
    average = averager.result(beta)
    mean = np.mean([b.values for b in betas], axis=0)
    np.testing.assert_allclose(average.block("d"), mean[model.layout.slice("d")], atol=1e-12)
    assert model.constraint_violation(average) < 1e-10


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(ALGORITHM_PRESETS))
def test_every_algorithm_is_reachable(name):
    preset = ALGORITHM_PRESETS[name]
    config = config_for_algorithm(name, "multilevel", 10_000)
    assert config.sampler.kind == preset.sampler
    assert config.qn == preset.qn
    assert (config.batch_size == 250) == preset.minibatch
    assert (config.batch_size is None) == (not preset.minibatch)
    assert config.block_rescale == ({"chol": 0.05} if preset.minibatch else {})
    assert config.averaging_start_epoch == 1000


def test_comparison_set_is_known():
    assert set(STUDY_ALGORITHMS) <= set(ALGORITHM_PRESETS)
    assert len(STUDY_ALGORITHMS) == 6


def test_config_overrides():
    config = config_for_algorithm("qn-d-somh", "m2pl", 500, batch_size=100, step=0.2, max_epochs=7)
    assert config.batch_size == 100
    assert config.sampler.sigma2 == 0.2
    assert config.block_rescale == {}
    assert config.averaging_start_epoch == 500
    assert config.max_epochs == 7


def test_config_validation():
    with pytest.raises(ValueError):
        config_for_algorithm("sgld", "m2pl", 100)
    with pytest.raises(ValidationError):
        OptimizerConfig(gamma_exponent=0.5)
    with pytest.raises(ValidationError):
        OptimizerConfig(block_rescale={"chol": 0.0})


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------

def _quiet(**values) -> OptimizerConfig:
    values.setdefault("stop", StopRule(enabled=False))
    return OptimizerConfig(**values)


def test_zero_epoch_run_returns_projected_init(m2pl_instance):
    dataset, model, beta, xi = m2pl_instance
    values = beta.values.copy()
    values[model.layout.slice("chol")] *= 3.0
    beta0 = beta.with_values(values)
    result = run(dataset, (beta0, xi), _quiet(max_epochs=0), model=model)
    np.testing.assert_array_equal(result.beta_final.values, model.project(beta0).values)
    np.testing.assert_array_equal(result.beta_pr.values, result.beta_final.values)
    assert result.diff_max_trace == []
    assert [c.epoch for c in result.checkpoints] == [0]
    assert result.epochs == 0


def test_frozen_parameters_keep_sampling(multilevel_instance):
    dataset, model, beta, xi = multilevel_instance
    result = run(dataset, (beta, xi), _quiet(max_epochs=3, gamma_scale=0.0, qn=True), model=model)
    for cp in result.checkpoints:
        np.testing.assert_array_equal(cp.beta.values, beta.values)
    assert not np.array_equal(result.xi_final, xi)
    assert result.acceptance_rate > 0


def test_checkpoints_respect_constraints(m2pl_instance):
    dataset, model, beta, xi = m2pl_instance
    config = _quiet(max_epochs=4, batch_size=5, averaging_start_epoch=1, qn=True, gamma_scale=0.2)
    result = run(dataset, (beta, xi), config, model=model)
    assert result.updates == 4 * 4
    for cp in result.checkpoints:
        assert model.constraint_violation(cp.beta) < 1e-10
        assert model.constraint_violation(cp.reported_beta) < 1e-10
        assert model.chol_of(cp.beta)[0, 0] == 1.0
        assert not model.negative_chol_diagonal(cp.beta)
    assert result.checkpoints[1].beta_avg is None
    assert result.checkpoints[2].beta_avg is not None
    assert (result.qn_state.d_diag >= 1e-2).all()


def test_run_is_reproducible():
    dataset, model, beta, xi = make_m2pl(np.random.default_rng(5), n_obs=200, n_items=6, n_factors=2)
    config = _quiet(max_epochs=3, seed=4, sampler=SamplerConfig(kind="mala", h=0.2))
    first = run(dataset, (beta, xi), config, model=model)
    second = run(dataset, (beta, xi), config, model=model)
    threaded = run(dataset, (beta, xi), config.model_copy(update={"workers": 3}), model=model)
    np.testing.assert_array_equal(first.beta_final.values, second.beta_final.values)
    np.testing.assert_array_equal(first.xi_final, second.xi_final)
    np.testing.assert_allclose(threaded.beta_final.values, first.beta_final.values, atol=1e-10)
    assert [c.acceptance for c in threaded.checkpoints[1:]] == [c.acceptance for c in first.checkpoints[1:]]


def test_partition_minibatches(multilevel_instance):
    dataset, model, beta, xi = multilevel_instance
    result = run(dataset, (beta, xi), _quiet(max_epochs=2, batch_size=5, minibatch_mode="partition"), model=model)
    assert result.updates == 8
    assert result.stop_reason == "max_epochs"


def test_stop_rule_ends_run(multilevel_instance):
    dataset, model, beta, xi = multilevel_instance
    config = OptimizerConfig(max_epochs=50, gamma_scale=0.0,
                             stop=StopRule(window_w=1, threshold=0.05, consecutive=2))
    result = run(dataset, (beta, xi), config, model=model)
    assert result.stop_reason == "diff_max"
    assert result.epochs == 2
    assert result.diff_max_trace == [0.0, 0.0]


def test_optional_outputs(multilevel_instance):
    dataset, model, beta, xi = multilevel_instance
    config = _quiet(max_epochs=4, collect_information=True, information_burn_in=1,
                    collect_latent_moments=True, average_last_epochs=2)
    result = run(dataset, (beta, xi), config, model=model)
    info = result.observed_information
    assert info.iterations_averaged == 3
    assert info.is_symmetric()
    assert info.min_eigenvalue() > -1e-8
    assert (result.latent_moments.count == 4).all()
    assert result.beta_last_avg is not None


def test_divergence_keeps_last_checkpoint(m2pl_instance):
    dataset, model, beta, xi = m2pl_instance
    config = _quiet(max_epochs=3, sampler=SamplerConfig(h=1e9))
    with pytest.raises(NumericalDivergenceError) as excinfo:
        run(dataset, (beta, xi), config, model=model)
    assert excinfo.value.last_checkpoint.epoch == 0


def test_batch_larger_than_data(m2pl_instance):
    dataset, model, beta, xi = m2pl_instance
    with pytest.raises(DataValidationError):
        run(dataset, (beta, xi), _quiet(batch_size=dataset.n_obs + 1), model=model)


def test_negative_chol_diagonal_is_flagged():
    model = MultilevelLogisticModel(1)
    dataset = Dataset.from_groups([np.array([1.0, 0.0])] * 4, [np.ones((2, 1))] * 4)
    beta = model.make_params({"mu": [0.0], "chol": [-0.5]})
    result = run(dataset, (beta, np.zeros((4, 1))), _quiet(max_epochs=1, gamma_scale=0.0), model=model)
    assert result.flags == ["negative_chol_diagonal"]


@pytest.mark.slow
def test_one_factor_fit_reaches_quadrature_mmle():
    setting = SimSetting(model="m2pl", n_obs=2000, n_items=10, n_factors=1, sigma_diag=1.0,
                         sigma_offdiag=0.0, q_matrix=[[1]] * 10)
    dataset, _, xi_true = simulate_dataset(setting, 3)
    model = build_model(dataset)
    init = initial_values(model, dataset, 3, "simulation", true_xi=xi_true)
    config = config_for_algorithm("d-somala", "m2pl", dataset.n_obs, step=0.3, max_epochs=400,
                                  averaging_start_epoch=100, stop=StopRule(enabled=False), seed=3)
    result = run(dataset, init, config, model=model)
    mmle = quadrature_mmle_1d(dataset, model.make_params({"d": np.zeros(10), "a": np.ones(10),
                                                          "chol": chol_entries(np.eye(1))}))
    assert mmle.loglik - quadrature_loglik_1d(dataset, result.beta_pr) < 0.1
