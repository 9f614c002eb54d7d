#!/usr/bin/env python3
"""
Stochastic-approximation outer loop.

Each parameter update draws a batch (all rows for fullbatch algorithms),
moves the batch's latent samples with one sampler sweep, optionally refreshes
the diagonal quasi-Newton scaling, and takes a projected stochastic-gradient
ascent step. The eight named algorithms differ only in sampler kind, batch size
and whether the quasi-Newton scaling is on.
"""
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator

from somala_config import resolve_algorithm
from somala_estimators import InfoMatrix, InformationAccumulator, InformationMethod, LatentMoments
from somala_models import (
    DataValidationError,
    Dataset,
    LatentVariableModel,
    NumericalDivergenceError,
    ParamVector,
    PreparedParams,
    build_model,
    check_latent,
)
from somala_samplers import SamplerConfig, sweep

logger = logging.getLogger(__name__)

BATCH_STREAM = 307
DEFAULT_MINIBATCH = 250
QN_FLOOR = 1e-2
AVERAGING_START = {"multilevel": 1000, "m2pl": 500}
MINIBATCH_CHOL_RESCALE = 0.05


class StopRule(BaseModel):
    """DIFF_MAX stopping: window averages compared every ``window_w`` epochs"""
    window_w: int = Field(50, ge=1)
    threshold: float = Field(0.05, gt=0)
    consecutive: int = Field(10, ge=1)
    enabled: bool = True


class OptimizerConfig(BaseModel):
    sampler: SamplerConfig = SamplerConfig()
    batch_size: Optional[int] = Field(None, ge=1, description="None runs fullbatch")
    qn: bool = False
    gamma_exponent: float = 0.51
    # 0 freezes the parameters while the sampler keeps mixing
    gamma_scale: float = Field(1.0, ge=0)
    block_rescale: Dict[str, float] = Field(default_factory=dict)
    averaging_start_epoch: int = Field(0, ge=0)
    average_last_epochs: Optional[int] = Field(None, ge=1)
    stop: StopRule = StopRule()
    max_epochs: int = Field(1000, ge=0)
    seed: int = 0
    minibatch_mode: Literal["random", "partition"] = "random"
    hessian: Literal["fd", "analytic"] = "fd"
    fd_step: float = Field(1e-5, gt=0)
    qn_floor: float = Field(QN_FLOOR, gt=0)
    workers: int = Field(1, ge=1)
    collect_information: bool = False
    information_burn_in: int = Field(0, ge=0)
    information_method: InformationMethod = "posterior_mean"
    collect_latent_moments: bool = False
    latent_moment_cap: int = Field(500, ge=1)

    @field_validator("gamma_exponent")
    @classmethod
    def _exponent_range(cls, value: float) -> float:
        if not 0.5 < value <= 1.0:
            raise ValueError("gamma_exponent must lie in (0.5, 1]")
        return value

    @field_validator("block_rescale")
    @classmethod
    def _positive_rescale(cls, value: Dict[str, float]) -> Dict[str, float]:
        bad = {k: v for k, v in value.items() if v <= 0}
        if bad:
            raise ValueError(f"Rescale factors must be positive: {bad}")
        return value


def config_for_algorithm(algorithm: str, model_kind: str, n_obs: int, batch_size: Optional[int] = None,
                         step: Optional[float] = None, **overrides) -> OptimizerConfig:
    """OptimizerConfig for a named algorithm with the simulation-study defaults"""
    preset = resolve_algorithm(algorithm)
    sampler = SamplerConfig(kind=preset.sampler)
    if step is not None:
        sampler = sampler.with_step(step)
    values = {
        "sampler": sampler,
        "qn": preset.qn,
        "batch_size": min(batch_size or DEFAULT_MINIBATCH, n_obs) if preset.minibatch else None,
        "block_rescale": {"chol": MINIBATCH_CHOL_RESCALE} if preset.minibatch and model_kind == "multilevel" else {},
        "averaging_start_epoch": AVERAGING_START.get(model_kind, 0),
    }
    values.update(overrides)
    return OptimizerConfig.model_validate(values)


# ---------------------------------------------------------------------------
# State and results
# ---------------------------------------------------------------------------

@dataclass
class QNState:
    d_diag: np.ndarray

    @classmethod
    def initial(cls, n_params: int) -> "QNState":
        return cls(np.ones(n_params))


@dataclass
class Checkpoint:
    epoch: int
    seconds: float
    beta: ParamVector
    acceptance: float
    neg_complete_loglik: float
    beta_avg: Optional[ParamVector] = None

    @property
    def reported_beta(self) -> ParamVector:
        return self.beta_avg if self.beta_avg is not None else self.beta


@dataclass
class FitResult:
    beta_final: ParamVector
    beta_pr: ParamVector
    checkpoints: List[Checkpoint]
    stop_reason: str
    diff_max_trace: List[float]
    xi_final: np.ndarray
    config: OptimizerConfig
    updates: int = 0
    seconds: float = 0.0
    beta_last_avg: Optional[ParamVector] = None
    observed_information: Optional[InfoMatrix] = None
    latent_moments: Optional[LatentMoments] = None
    qn_state: Optional[QNState] = None
    flags: List[str] = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return self.checkpoints[-1].epoch if self.checkpoints else 0

    @property
    def acceptance_rate(self) -> float:
        rates = [c.acceptance for c in self.checkpoints if c.epoch > 0]
        return float(np.mean(rates)) if rates else float("nan")


# ---------------------------------------------------------------------------
# Update rules
# ---------------------------------------------------------------------------

def batch_scores(beta: ParamVector, xi: np.ndarray, dataset: Dataset, rows: Sequence[int],
                 model: Optional[LatentVariableModel] = None,
                 prepared: Optional[PreparedParams] = None) -> np.ndarray:
    model = model or build_model(dataset)
    prep = prepared or model.prepare(beta)
    rows = np.asarray(rows, dtype=int)
    return model.grad_params(prep, np.asarray(xi)[rows], dataset, rows)


def minibatch_sg(beta: ParamVector, xi: np.ndarray, dataset: Dataset, rows: Sequence[int],
                 model: Optional[LatentVariableModel] = None, prepared: Optional[PreparedParams] = None,
                 scale: Optional[float] = None) -> np.ndarray:
    """(N/n) sum_{i in S} d log f_i / d beta; ``scale`` replaces N/n when given"""
    rows = np.asarray(rows, dtype=int)
    if rows.size == 0:
        raise DataValidationError("Minibatch is empty")
    return sg_from_scores(batch_scores(beta, xi, dataset, rows, model, prepared), dataset.n_obs, scale)


def sg_from_scores(scores: np.ndarray, n_total: int, scale: Optional[float] = None) -> np.ndarray:
    factor = n_total / scores.shape[0] if scale is None else scale
    return factor * scores.sum(axis=0)


def sg_update(beta: ParamVector, grad: np.ndarray, gamma: float, qn_state: Optional[QNState],
              block_rescale: Union[Dict[str, float], np.ndarray, None],
              model: LatentVariableModel) -> ParamVector:
    """Projected ascent step beta + gamma D^{-1} (rescale * grad), taken along the constraint manifold"""
    if gamma < 0:
        raise ValueError("Step size must be non-negative")
    if isinstance(block_rescale, np.ndarray):
        rescale = block_rescale
    else:
        rescale = model.rescale_vector(block_rescale)
    step = rescale * np.asarray(grad, dtype=float)
    if qn_state is not None:
        if (qn_state.d_diag <= 0).any():
            raise ValueError("Quasi-Newton diagonal must be positive")
        step = step / qn_state.d_diag
    step = gamma * step
    if not np.isfinite(step).all():
        bad = [beta.layout.labels[q] for q in np.flatnonzero(~np.isfinite(step))[:5]]
        raise NumericalDivergenceError(f"Non-finite parameter update at {bad}")
    values = beta.values + model.tangent_step(beta, step)
    return model.project(ParamVector(values, beta.layout))


def hessian_diag_rows(model: LatentVariableModel, beta: ParamVector, xi_rows: np.ndarray, dataset: Dataset,
                      rows: np.ndarray, method: str = "fd", fd_step: float = 1e-5,
                      prepared: Optional[PreparedParams] = None) -> np.ndarray:
    """Per-row diagonal of d^2 log f_i / d beta^2"""
    if method == "analytic":
        return model.hessian_diag(prepared or model.prepare(beta), xi_rows, dataset, rows)
    out = np.empty((rows.size, model.n_params))
    for q in range(model.n_params):
        shifted = beta.values.copy()
        shifted[q] += fd_step
        upper = model.grad_params(model.prepare(beta.with_values(shifted)), xi_rows, dataset, rows)[:, q]
        shifted[q] -= 2.0 * fd_step
        lower = model.grad_params(model.prepare(beta.with_values(shifted)), xi_rows, dataset, rows)[:, q]
        out[:, q] = (upper - lower) / (2.0 * fd_step)
    return out


def qn_update(qn_state: QNState, beta: ParamVector, xi_batch: np.ndarray, dataset: Dataset, rows: Sequence[int],
              gamma: float, model: Optional[LatentVariableModel] = None, scale: Optional[float] = None,
              method: str = "fd", fd_step: float = 1e-5, floor: float = QN_FLOOR,
              prepared: Optional[PreparedParams] = None) -> QNState:
    """d <- max(d + gamma (h - d), floor), h the scaled negative Hessian diagonal over the batch"""
    rows = np.asarray(rows, dtype=int)
    if rows.size == 0:
        raise DataValidationError("Quasi-Newton update needs a nonempty batch")
    model = model or build_model(dataset)
    factor = dataset.n_obs / rows.size if scale is None else scale
    h_rows = hessian_diag_rows(model, beta, np.atleast_2d(xi_batch), dataset, rows, method, fd_step, prepared)
    target = -factor * h_rows.sum(axis=0)
    d_new = model.tie_qn_diagonal(qn_state.d_diag + gamma * (target - qn_state.d_diag))
    return QNState(np.maximum(d_new, floor))


def step_schedule(update_counter: int, n: int, N: int, gamma_exponent: float, scale: float = 1.0) -> float:
    """gamma = scale * t_eff^-exponent, t_eff counting blocks of floor(N/n) updates"""
    if update_counter < 1:
        raise ValueError("Update counter starts at 1")
    per_epoch = max(1, N // n)
    t_eff = -(-update_counter // per_epoch)
    return scale * t_eff ** -gamma_exponent


# ---------------------------------------------------------------------------
# Averaging and stopping
# ---------------------------------------------------------------------------

class PolyakRuppertAverager:
    """Running mean of parameter updates, projected back onto the model's space"""

    def __init__(self, model: LatentVariableModel):
        self.model = model
        self.mean: Optional[np.ndarray] = None
        self.count = 0

    def update(self, beta: ParamVector):
        self.count += 1
        if self.mean is None:
            self.mean = beta.values.copy()
        else:
            self.mean += (beta.values - self.mean) / self.count

    def result(self, fallback: ParamVector) -> ParamVector:
        if self.mean is None:
            return fallback
        return self.model.project(ParamVector(self.mean.copy(), self.model.layout))


class DiffMaxMonitor:
    """Epoch-end parameters averaged per window; fires after enough small window-to-window moves"""

    def __init__(self, rule: StopRule, beta0: np.ndarray):
        self.rule = rule
        self.previous = np.asarray(beta0, dtype=float).copy()
        self.window_sum = np.zeros_like(self.previous)
        self.window_count = 0
        self.below = 0
        self.trace: List[float] = []

    def update(self, beta_values: np.ndarray) -> Optional[float]:
        self.window_sum += beta_values
        self.window_count += 1
        if self.window_count < self.rule.window_w:
            return None
        average = self.window_sum / self.window_count
        value = float(np.max(np.abs(average - self.previous)))
        self.previous = average
        self.window_sum = np.zeros_like(self.previous)
        self.window_count = 0
        self.below = self.below + 1 if value < self.rule.threshold else 0
        self.trace.append(value)
        return value

    @property
    def fired(self) -> bool:
        return self.rule.enabled and self.below >= self.rule.consecutive


def diff_max_monitor(window_averages: Sequence[np.ndarray], rule: StopRule,
                     initial: Optional[np.ndarray] = None) -> Tuple[List[float], bool]:
    """DIFF_MAX values for consecutive window averages and whether the rule fired.

    With ``initial`` the first window is compared against it; otherwise the
    first window only seeds the comparison.
    """
    windows = [np.asarray(w, dtype=float) for w in window_averages]
    if initial is None:
        if not windows:
            return [], False
        initial, windows = windows[0], windows[1:]
    monitor = DiffMaxMonitor(rule.model_copy(update={"window_w": 1}), initial)
    fired = False
    for w in windows:
        monitor.update(w)
        fired = fired or monitor.fired
    return monitor.trace, fired


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------

def _batches(epoch_rng: np.random.Generator, N: int, n: int, per_epoch: int, mode: str):
    if n >= N:
        all_rows = np.arange(N)
        return [all_rows] * per_epoch
    if mode == "partition":
        perm = epoch_rng.permutation(N)
        return [np.sort(perm[s * n:(s + 1) * n]) for s in range(per_epoch)]
    return [np.sort(epoch_rng.choice(N, size=n, replace=False)) for _ in range(per_epoch)]


def run(dataset: Dataset, init: Tuple[ParamVector, np.ndarray], config: OptimizerConfig,
        model: Optional[LatentVariableModel] = None) -> FitResult:
    """Fit beta by stochastic approximation from ``init = (beta0, xi0)``"""
    model = model or build_model(dataset)
    beta0, xi0 = init
    model.check_params(beta0)
    xi = check_latent(xi0, dataset).copy()
    N = dataset.n_obs
    n = N if config.batch_size is None else config.batch_size
    if n > N:
        raise DataValidationError(f"Batch size {n} exceeds N = {N}")
    per_epoch = max(1, N // n)
    rescale = model.rescale_vector(config.block_rescale)
    kind = config.sampler.kind.upper()
    label = f"{'QN-' if config.qn else ''}{'D-' if n < N else ''}SO{'MALA' if kind == 'MALA' else 'MH'}"

    started = time.perf_counter()
    beta = model.project(beta0)
    prep = model.prepare(beta)
    checkpoints = [Checkpoint(0, 0.0, beta, float("nan"),
                              -float(model.complete_data_loglik(prep, xi, dataset).sum()))]
    logger.info(f"{label}: N={N}, n={n}, p={model.n_params}, {per_epoch} updates/epoch, "
                f"step {config.sampler.step_value}, max {config.max_epochs} epochs")

    qn_state = QNState.initial(model.n_params) if config.qn else None
    averager = PolyakRuppertAverager(model)
    monitor = DiffMaxMonitor(config.stop, beta.values)
    last_epochs = deque(maxlen=config.average_last_epochs) if config.average_last_epochs else None
    information = (InformationAccumulator(model.n_params, N, config.information_method)
                   if config.collect_information else None)
    moments = (LatentMoments(N, model.n_factors, config.latent_moment_cap)
               if config.collect_latent_moments else None)
    flags: List[str] = []
    batch_rng = np.random.default_rng([config.seed, BATCH_STREAM])
    counter = 0
    stop_reason = "max_epochs"

    for epoch in range(1, config.max_epochs + 1):
        accepted = 0
        proposals = 0
        averaging = epoch > config.averaging_start_epoch
        try:
            for rows in _batches(batch_rng, N, n, per_epoch, config.minibatch_mode):
                counter += 1
                xi, acc = sweep(beta, xi, dataset, rows, config.sampler, config.seed, step=counter,
                                workers=config.workers, model=model, prepared=prep)
                accepted += acc
                proposals += rows.size * config.sampler.inner_steps
                gamma_raw = step_schedule(counter, n, N, config.gamma_exponent)
                gamma = config.gamma_scale * gamma_raw
                scores = batch_scores(beta, xi, dataset, rows, model, prep)
                if qn_state is not None:
                    qn_state = qn_update(qn_state, beta, xi[rows], dataset, rows, gamma_raw, model,
                                         scale=1.0 / rows.size, method=config.hessian,
                                         fd_step=config.fd_step, floor=config.qn_floor, prepared=prep)
                if information is not None:
                    information.update(scores, gamma_raw, record=epoch > config.information_burn_in, rows=rows)
                if moments is not None and averaging:
                    moments.add(rows, xi[rows])
                grad = sg_from_scores(scores, N, scale=1.0 / rows.size)
                beta = sg_update(beta, grad, gamma, qn_state, rescale, model)
                prep = model.prepare(beta)
                if averaging:
                    averager.update(beta)
            neg_loglik = -float(model.complete_data_loglik(prep, xi, dataset).sum())
        except NumericalDivergenceError as e:
            logger.error(f"{label} diverged in epoch {epoch}: {e}")
            raise NumericalDivergenceError(f"Epoch {epoch}: {e}", last_checkpoint=checkpoints[-1],
                                           checkpoints=checkpoints) from e

        if model.negative_chol_diagonal(beta) and "negative_chol_diagonal" not in flags:
            flags.append("negative_chol_diagonal")
            logger.warning(f"{label}: a Cholesky diagonal entry crossed zero in epoch {epoch}")
        acceptance = accepted / proposals if proposals else float("nan")
        checkpoints.append(Checkpoint(epoch, time.perf_counter() - started, beta, acceptance, neg_loglik,
                                      averager.result(beta) if averaging else None))
        if last_epochs is not None:
            last_epochs.append(beta.values.copy())

        diff = monitor.update(beta.values)
        if diff is not None:
            logger.info(f"{label} epoch {epoch}: DIFF_MAX {diff:.4g}, acceptance {acceptance:.3f}, "
                        f"-loglik {neg_loglik:.2f}")
        else:
            logger.debug(f"{label} epoch {epoch}: acceptance {acceptance:.3f}, -loglik {neg_loglik:.2f}")
        if monitor.fired:
            stop_reason = "diff_max"
            logger.info(f"{label} stopped by DIFF_MAX after {epoch} epochs")
            break

    beta_last_avg = None
    if last_epochs:
        beta_last_avg = model.project(ParamVector(np.mean(np.stack(last_epochs), axis=0), model.layout))

    observed = None
    if information is not None and information.count:
        observed = information.result(model.layout.labels)
    elif information is not None:
        logger.warning("Observed information requested but no iteration passed the burn-in")

    elapsed = time.perf_counter() - started
    logger.info(f"{label} finished: {stop_reason}, {checkpoints[-1].epoch} epochs, {counter} updates, "
                f"{elapsed:.1f}s")
    return FitResult(
        beta_final=beta,
        beta_pr=averager.result(beta),
        checkpoints=checkpoints,
        stop_reason=stop_reason,
        diff_max_trace=list(monitor.trace),
        xi_final=xi,
        config=config,
        updates=counter,
        seconds=elapsed,
        beta_last_avg=beta_last_avg,
        observed_information=observed,
        latent_moments=moments,
        qn_state=qn_state,
        flags=flags,
    )
