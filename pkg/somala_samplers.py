#!/usr/bin/env python3
"""
Per-observation MCMC kernels targeting the latent posterior p(xi_i | Y_i, beta).

Both kernels are vectorised over a block of rows: each row takes exactly one
Gaussian K-vector and one uniform draw per kernel step. ``sweep`` draws those
variates for a whole batch from a substream keyed by (seed, step, inner step)
and hands them to rows in ascending index order, so the result does not depend
on how rows are split across workers.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from somala_models import (
    Dataset,
    LatentVariableModel,
    NumericalDivergenceError,
    ParamVector,
    PreparedParams,
    build_model,
    single_latent,
)

logger = logging.getLogger(__name__)

DRIFT_LIMIT = 1e6
SWEEP_STREAM = 101
MIN_ROWS_PER_WORKER = 64

SamplerKind = Literal["mala", "rwmh"]


class SamplerConfig(BaseModel):
    kind: SamplerKind = "mala"
    h: float = Field(0.1, gt=0, description="MALA Euler-Maruyama step size")
    sigma2: float = Field(0.3, gt=0, description="RWMH proposal variance")
    inner_steps: int = Field(1, ge=1)

    @property
    def step_value(self) -> float:
        return self.h if self.kind == "mala" else self.sigma2

    def with_step(self, value: float) -> "SamplerConfig":
        field = "h" if self.kind == "mala" else "sigma2"
        return SamplerConfig.model_validate({**self.model_dump(), field: value})


@dataclass
class KernelOutcome:
    new_xi: np.ndarray
    accepted: bool
    log_alpha: float


def log_transition_density(xi_to: np.ndarray, xi_from: np.ndarray, grad_from: np.ndarray, h: float) -> np.ndarray:
    """log q_h(xi_to | xi_from) for the Langevin proposal, per row"""
    xi_to = np.atleast_2d(xi_to)
    K = xi_to.shape[1]
    diff = xi_to - (np.atleast_2d(xi_from) - h * np.atleast_2d(grad_from))
    return -0.5 * K * math.log(4.0 * math.pi * h) - np.sum(diff * diff, axis=1) / (4.0 * h)


def _accept(log_ratio: np.ndarray, uniforms: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    log_alpha = np.minimum(0.0, np.where(np.isnan(log_ratio), -np.inf, log_ratio))
    return uniforms < np.exp(log_alpha), log_alpha


def _check_drift(drift: np.ndarray, h: float):
    norms = np.linalg.norm(drift, axis=1)
    if not np.isfinite(norms).all() or norms.max(initial=0.0) > DRIFT_LIMIT:
        worst = float(np.nanmax(np.where(np.isfinite(norms), norms, np.inf)))
        raise NumericalDivergenceError(
            f"Langevin drift |h * grad U| = {worst:.3g} exceeds {DRIFT_LIMIT:.0e}; reduce h (currently {h})")


def mala_kernel(model: LatentVariableModel, prep: PreparedParams, xi: np.ndarray, dataset: Dataset,
                rows: np.ndarray, h: float, normals: np.ndarray, uniforms: np.ndarray):
    """One MALA step for every row; returns (new_xi, accepted, log_alpha)"""
    log_f = model.complete_data_loglik(prep, xi, dataset, rows)
    grad = model.grad_latent(prep, xi, dataset, rows)
    _check_drift(h * grad, h)
    proposal = xi - h * grad + math.sqrt(2.0 * h) * normals
    with np.errstate(over="ignore", invalid="ignore"):
        log_f_prop = model.complete_data_loglik(prep, proposal, dataset, rows)
        grad_prop = model.grad_latent(prep, proposal, dataset, rows)
        log_ratio = (log_f_prop + log_transition_density(xi, proposal, grad_prop, h)
                     - log_f - log_transition_density(proposal, xi, grad, h))
    accepted, log_alpha = _accept(log_ratio, uniforms)
    return np.where(accepted[:, None], proposal, xi), accepted, log_alpha


def rwmh_kernel(model: LatentVariableModel, prep: PreparedParams, xi: np.ndarray, dataset: Dataset,
                rows: np.ndarray, sigma2: float, normals: np.ndarray, uniforms: np.ndarray):
    """One random-walk Metropolis step for every row; the symmetric proposal cancels"""
    proposal = xi + math.sqrt(sigma2) * normals
    log_f = model.complete_data_loglik(prep, xi, dataset, rows)
    if not np.isfinite(log_f).all():
        raise NumericalDivergenceError("Non-finite complete-data log-likelihood at the current latent state")
    with np.errstate(over="ignore", invalid="ignore"):
        log_ratio = model.complete_data_loglik(prep, proposal, dataset, rows) - log_f
    accepted, log_alpha = _accept(log_ratio, uniforms)
    return np.where(accepted[:, None], proposal, xi), accepted, log_alpha


def _single_step(kernel, beta, xi_i, dataset, i, step, rng) -> KernelOutcome:
    model = build_model(dataset)
    xi_row = single_latent(xi_i, model.n_factors)
    normals = rng.standard_normal((1, model.n_factors))
    uniforms = rng.random(1)
    new_xi, accepted, log_alpha = kernel(model, model.prepare(beta), xi_row, dataset,
                                         np.array([i]), step, normals, uniforms)
    return KernelOutcome(new_xi=new_xi[0], accepted=bool(accepted[0]), log_alpha=float(log_alpha[0]))


def mala_step(beta: ParamVector, xi_i: np.ndarray, dataset: Dataset, i: int, h: float,
              rng: np.random.Generator) -> KernelOutcome:
    if h <= 0:
        raise ValueError("MALA step size must be positive")
    return _single_step(mala_kernel, beta, xi_i, dataset, i, h, rng)


def rwmh_step(beta: ParamVector, xi_i: np.ndarray, dataset: Dataset, i: int, sigma2: float,
              rng: np.random.Generator) -> KernelOutcome:
    if sigma2 <= 0:
        raise ValueError("RWMH proposal variance must be positive")
    return _single_step(rwmh_kernel, beta, xi_i, dataset, i, sigma2, rng)


KERNELS = {"mala": mala_kernel, "rwmh": rwmh_kernel}


def _chunks(n_rows: int, workers: int) -> Sequence[slice]:
    n_chunks = max(1, min(workers, n_rows // MIN_ROWS_PER_WORKER))
    bounds = np.linspace(0, n_rows, n_chunks + 1).astype(int)
    return [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def sweep(beta: ParamVector, xi: np.ndarray, dataset: Dataset, indices: Sequence[int], config: SamplerConfig,
          seed: int, step: int = 0, workers: int = 1, model: Optional[LatentVariableModel] = None,
          prepared: Optional[PreparedParams] = None) -> Tuple[np.ndarray, int]:
    """Apply ``config.inner_steps`` kernel steps to each listed row.

    Returns the updated latent state (rows outside ``indices`` untouched) and
    the number of accepted proposals.
    """
    model = model or build_model(dataset)
    prep = prepared or model.prepare(beta)
    rows = np.unique(np.asarray(indices, dtype=int))
    new_xi = np.array(xi, dtype=float, copy=True)
    if rows.size == 0:
        return new_xi, 0
    if rows[0] < 0 or rows[-1] >= dataset.n_obs:
        raise ValueError(f"Sweep indices outside [0, {dataset.n_obs})")

    kernel = KERNELS[config.kind]
    step_value = config.step_value
    chunks = _chunks(rows.size, workers)
    current = new_xi[rows]
    accepted_total = 0

    for inner in range(config.inner_steps):
        rng = np.random.default_rng([seed, SWEEP_STREAM, step, inner])
        normals = rng.standard_normal((rows.size, model.n_factors))
        uniforms = rng.random(rows.size)

        def run_chunk(part: slice):
            return kernel(model, prep, current[part], dataset, rows[part], step_value,
                          normals[part], uniforms[part])

        if len(chunks) == 1:
            results = [run_chunk(chunks[0])]
        else:
            with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
                results = list(pool.map(run_chunk, chunks))
        current = np.vstack([r[0] for r in results])
        accepted_total += int(sum(r[1].sum() for r in results))

    new_xi[rows] = current
    if not np.isfinite(current).all():
        raise NumericalDivergenceError("Sampler produced non-finite latent values")
    return new_xi, accepted_total
