#!/usr/bin/env python3
"""
Post-fit estimators: observed information through the Fisher identity,
importance-sampling estimates of the marginal log-likelihood and a
Gauss-Hermite quadrature oracle for one-factor models.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.optimize import minimize
from scipy.special import logsumexp

from somala_models import (
    LOG_2PI,
    Dataset,
    DataValidationError,
    EstimationError,
    LatentVariableModel,
    ParamVector,
    PreparedParams,
    build_model,
)

logger = logging.getLogger(__name__)

DEFAULT_INFLATION = 2.0
EIGEN_FLOOR = 1e-8
MIN_DENSITY_SAMPLES = 10
MAX_RETAINED_SAMPLES = 500
IS_STREAM = 211
# rows x draws evaluated at once by the importance sampler
IS_CHUNK_CELLS = 200_000
DEFAULT_NODES = 61


# ---------------------------------------------------------------------------
# Observed information
# ---------------------------------------------------------------------------

@dataclass
class InfoMatrix:
    matrix: np.ndarray
    iterations_averaged: int
    labels: Tuple[str, ...] = ()

    def is_symmetric(self, tol: float = 1e-12) -> bool:
        return bool(np.max(np.abs(self.matrix - self.matrix.T), initial=0.0) <= tol)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix).min())

    def standard_errors(self, n_obs: int, free: Optional[np.ndarray] = None) -> np.ndarray:
        """Standard errors from the per-observation information scaled to N rows.

        With a ``free`` mask only that sub-block is inverted and the other
        entries are NaN.
        """
        free = np.ones(self.matrix.shape[0], dtype=bool) if free is None else np.asarray(free, dtype=bool)
        cov = np.linalg.pinv(self.matrix[np.ix_(free, free)] * n_obs, hermitian=True)
        out = np.full(self.matrix.shape[0], np.nan)
        out[free] = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        return out


def score_outer_information(scores: np.ndarray) -> np.ndarray:
    """(1/m) sum_i s_i s_i^T"""
    scores = np.atleast_2d(scores)
    if scores.shape[0] == 0:
        raise EstimationError("No scores to form an information matrix")
    outer = scores.T @ scores / scores.shape[0]
    return 0.5 * (outer + outer.T)


InformationMethod = Literal["posterior_mean", "outer"]


class InformationAccumulator:
    """Observed information along a run, averaged over the post-burn-in iterations.

    ``posterior_mean`` tracks each observation's score by s_i <- s_i + gamma (s - s_i)
    and uses (1/N) sum_i s_i s_i^T over the observations seen so far. ``outer``
    runs I <- I + gamma (I~ - I) on the batch outer product, which estimates the
    complete-data score covariance rather than the observed information.
    """

    def __init__(self, n_params: int, n_obs: Optional[int] = None, method: InformationMethod = "posterior_mean"):
        if method not in ("posterior_mean", "outer"):
            raise DataValidationError(f"Unknown information method {method!r}")
        self.method = method
        self.n_params = n_params
        self.current = np.zeros((n_params, n_params))
        self.total = np.zeros((n_params, n_params))
        self.count = 0
        self.mean_scores = None if n_obs is None else np.zeros((n_obs, n_params))
        self.visits = None if n_obs is None else np.zeros(n_obs, dtype=int)

    def update(self, scores: np.ndarray, gamma: float, record: bool = True, rows: Optional[np.ndarray] = None):
        scores = np.atleast_2d(scores)
        if self.method == "outer":
            self.current += gamma * (score_outer_information(scores) - self.current)
        else:
            self._track_scores(scores, gamma, rows)
        if record:
            if self.method == "posterior_mean":
                self.current = score_outer_information(self.mean_scores[self.visits > 0])
            self.total += self.current
            self.count += 1

    def _track_scores(self, scores: np.ndarray, gamma: float, rows: Optional[np.ndarray]):
        rows = np.arange(scores.shape[0]) if rows is None else np.asarray(rows, dtype=int)
        if self.mean_scores is None:
            self.mean_scores = np.zeros((rows.max(initial=-1) + 1, self.n_params))
            self.visits = np.zeros(self.mean_scores.shape[0], dtype=int)
        if rows.size != scores.shape[0]:
            raise DataValidationError(f"{scores.shape[0]} score rows for {rows.size} observations")
        # a first visit takes the score as is
        weight = np.where(self.visits[rows] == 0, 1.0, gamma)[:, None]
        self.mean_scores[rows] += weight * (scores - self.mean_scores[rows])
        self.visits[rows] += 1

    def result(self, labels: Sequence[str] = ()) -> InfoMatrix:
        if self.count == 0:
            raise EstimationError("Observed information has no post-burn-in iterations")
        avg = self.total / self.count
        return InfoMatrix(0.5 * (avg + avg.T), self.count, tuple(labels))


def observed_information(trace: Iterable[Tuple[ParamVector, np.ndarray]], dataset: Dataset, burn_in: int,
                         gamma_exponent: float = 0.51, model: Optional[LatentVariableModel] = None,
                         method: InformationMethod = "posterior_mean") -> InfoMatrix:
    """Information estimate from a stored trace of (beta^(t), xi^(t+1)) pairs"""
    model = model or build_model(dataset)
    trace = list(trace)
    if len(trace) <= burn_in:
        raise EstimationError(f"Trace of length {len(trace)} has nothing after burn-in {burn_in}")
    acc = InformationAccumulator(model.n_params, dataset.n_obs, method)
    for t, (beta, xi) in enumerate(trace, start=1):
        scores = model.grad_params(model.prepare(beta), xi, dataset)
        acc.update(scores, t ** -gamma_exponent, record=t > burn_in)
    return acc.result(model.layout.labels)


# ---------------------------------------------------------------------------
# Importance density
# ---------------------------------------------------------------------------

class LatentMoments:
    """Streaming per-observation first and second moments of retained latents"""

    def __init__(self, n_obs: int, n_factors: int, cap: int = MAX_RETAINED_SAMPLES):
        self.count = np.zeros(n_obs, dtype=int)
        self.total = np.zeros((n_obs, n_factors))
        self.outer = np.zeros((n_obs, n_factors, n_factors))
        self.cap = cap

    def add(self, rows: np.ndarray, xi_rows: np.ndarray):
        rows = np.asarray(rows, dtype=int)
        keep = self.count[rows] < self.cap
        rows, xi_rows = rows[keep], np.atleast_2d(xi_rows)[keep]
        self.count[rows] += 1
        self.total[rows] += xi_rows
        self.outer[rows] += xi_rows[:, :, None] * xi_rows[:, None, :]

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "LatentMoments":
        """Moments of an (N, S, K) array of draws"""
        samples = np.asarray(samples, dtype=float)
        if samples.ndim != 3:
            raise DataValidationError("Latent samples must be shaped (N, S, K)")
        n_obs, n_samples, n_factors = samples.shape
        out = cls(n_obs, n_factors, cap=max(n_samples, 1))
        out.count[:] = n_samples
        out.total = samples.sum(axis=1)
        out.outer = np.einsum("nsk,nsl->nkl", samples, samples)
        return out


@dataclass
class ImportanceDensity:
    """Per-observation Gaussian proposals N(means[i], covs[i])"""
    means: np.ndarray
    covs: np.ndarray
    tail_inflation: float = DEFAULT_INFLATION
    chols: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.tail_inflation < 1.0:
            raise DataValidationError("Tail inflation must be at least 1")
        try:
            self.chols = np.linalg.cholesky(self.covs)
        except np.linalg.LinAlgError as e:
            raise EstimationError(f"Importance covariance is not positive definite: {e}")

    @classmethod
    def from_prior(cls, model: LatentVariableModel, beta: ParamVector, n_obs: int) -> "ImportanceDensity":
        prep = model.prepare(beta)
        K = model.n_factors
        sigma = prep.chol @ prep.chol.T
        return cls(np.tile(prep.mean, (n_obs, 1)), np.broadcast_to(sigma, (n_obs, K, K)).copy(), 1.0)

    def logpdf(self, rows: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """log density of xi[r, t] under observation rows[r]; xi is (r, T, K)"""
        L = self.chols[rows]
        resid = xi - self.means[rows][:, None, :]
        z = np.linalg.solve(L[:, None, :, :], resid[..., None])[..., 0]
        log_det = np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
        K = xi.shape[-1]
        return -0.5 * K * LOG_2PI - log_det[:, None] - 0.5 * np.sum(z * z, axis=-1)

    def sample(self, rows: np.ndarray, n_draws: int, rng: np.random.Generator) -> np.ndarray:
        K = self.means.shape[1]
        z = rng.standard_normal((rows.size, n_draws, K))
        return self.means[rows][:, None, :] + np.einsum("rkl,rtl->rtk", self.chols[rows], z)


def fit_importance_density(moments: LatentMoments, inflation: float = DEFAULT_INFLATION,
                           floor: float = EIGEN_FLOOR,
                           min_samples: int = MIN_DENSITY_SAMPLES) -> ImportanceDensity:
    """Moment-matched Gaussian per observation with an inflated diagonal"""
    if inflation < 1.0:
        raise DataValidationError("Tail inflation must be at least 1")
    if moments.count.size == 0 or (moments.count < min_samples).any():
        short = int((moments.count < min_samples).sum())
        raise EstimationError(f"{short} observations have fewer than {min_samples} retained latent samples")
    n = moments.count.astype(float)
    means = moments.total / n[:, None]
    covs = (moments.outer - n[:, None, None] * means[:, :, None] * means[:, None, :]) / (n - 1.0)[:, None, None]
    K = means.shape[1]
    diag = np.arange(K)
    covs[:, diag, diag] *= inflation
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    eigvals, eigvecs = np.linalg.eigh(covs)
    covs = np.einsum("nij,nj,nkj->nik", eigvecs, np.maximum(eigvals, floor), eigvecs)
    return ImportanceDensity(means, covs, inflation)


# ---------------------------------------------------------------------------
# Marginal log-likelihood
# ---------------------------------------------------------------------------

@dataclass
class LogMarginalReport:
    total: float
    per_obs: np.ndarray
    ess: np.ndarray
    max_weight_fraction: np.ndarray
    n_draws: int

    def summary(self) -> dict:
        return {
            "total": self.total,
            "n_draws": self.n_draws,
            "n_obs": int(self.per_obs.size),
            "ess_min": float(self.ess.min()),
            "ess_mean": float(self.ess.mean()),
            "max_weight_fraction": float(self.max_weight_fraction.max()),
        }


def is_log_marginal(dataset: Dataset, beta: ParamVector, density: ImportanceDensity, n_draws: int,
                    seed: int = 0, model: Optional[LatentVariableModel] = None) -> LogMarginalReport:
    """Self-normalised importance-sampling estimate of each log p(Y_i | beta)"""
    if n_draws < 1:
        raise DataValidationError("Need at least one importance draw")
    model = model or build_model(dataset)
    prep = model.prepare(beta)
    N, K = dataset.n_obs, model.n_factors
    per_obs = np.empty(N)
    ess = np.empty(N)
    max_frac = np.empty(N)
    chunk = max(1, IS_CHUNK_CELLS // n_draws)

    for start in range(0, N, chunk):
        rows = np.arange(start, min(start + chunk, N))
        rng = np.random.default_rng([seed, IS_STREAM, start])
        draws = density.sample(rows, n_draws, rng)
        flat = draws.reshape(-1, K)
        flat_rows = np.repeat(rows, n_draws)
        log_prior = model.prior_logpdf(prep, flat).reshape(rows.size, n_draws)
        log_lik = model.conditional_loglik(prep, flat, dataset, flat_rows).reshape(rows.size, n_draws)
        log_w = log_prior - density.logpdf(rows, draws)
        log_norm = logsumexp(log_w, axis=1)
        if not np.isfinite(log_norm).all():
            bad = rows[~np.isfinite(log_norm)].tolist()
            raise EstimationError(f"All importance weights vanish for observations {bad[:10]}; "
                                  f"the importance density does not cover the prior")
        per_obs[rows] = logsumexp(log_w + log_lik, axis=1) - log_norm
        ess[rows] = np.exp(2.0 * log_norm - logsumexp(2.0 * log_w, axis=1))
        max_frac[rows] = np.exp(log_w.max(axis=1) - log_norm)

    total = float(per_obs.sum())
    logger.info(f"IS log marginal likelihood {total:.4f} with T={n_draws}; "
                f"min ESS {ess.min():.1f}, max weight fraction {max_frac.max():.3f}")
    return LogMarginalReport(total, per_obs, ess, max_frac, n_draws)


# ---------------------------------------------------------------------------
# One-factor quadrature
# ---------------------------------------------------------------------------

def _require_one_factor(model: LatentVariableModel):
    if model.n_factors != 1:
        raise DataValidationError(f"Quadrature oracle needs K = 1, model has K = {model.n_factors}")


def posterior_modes_1d(model: LatentVariableModel, prep: PreparedParams, dataset: Dataset,
                       max_iter: int = 100, tol: float = 1e-10, fd_step: float = 1e-5) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior mode and curvature scale of every observation by damped Newton"""
    xi = np.tile(prep.mean, (dataset.n_obs, 1)).astype(float)
    for _ in range(max_iter):
        grad = model.grad_latent(prep, xi, dataset)
        curv = (model.grad_latent(prep, xi + fd_step, dataset)
                - model.grad_latent(prep, xi - fd_step, dataset)) / (2.0 * fd_step)
        step = np.clip(grad / curv, -1.0, 1.0)
        xi -= step
        if np.max(np.abs(step)) < tol:
            break
    curv = (model.grad_latent(prep, xi + fd_step, dataset)
            - model.grad_latent(prep, xi - fd_step, dataset)) / (2.0 * fd_step)
    return xi[:, 0], 1.0 / np.sqrt(curv[:, 0])


def _node_grid(model, prep, dataset, nodes, adaptive):
    z, w = hermegauss(nodes)
    if adaptive:
        centre, scale = posterior_modes_1d(model, prep, dataset)
    else:
        centre = np.full(dataset.n_obs, prep.mean[0])
        scale = np.full(dataset.n_obs, abs(prep.chol[0, 0]))
    points = centre[:, None] + scale[:, None] * z[None, :]
    return z, w, scale, points


def _node_log_terms(model, prep, dataset, nodes, adaptive):
    """log of each Gauss-Hermite summand, shape (N, nodes), plus the node grid"""
    z, w, scale, points = _node_grid(model, prep, dataset, nodes, adaptive)
    rows = np.repeat(np.arange(dataset.n_obs), nodes)
    log_f = model.complete_data_loglik(prep, points.reshape(-1, 1), dataset, rows).reshape(dataset.n_obs, nodes)
    terms = np.log(w)[None, :] + 0.5 * z[None, :] ** 2 + log_f
    return terms, scale, points, rows


def quadrature_loglik_1d_per_obs(dataset: Dataset, beta: ParamVector, nodes: int = DEFAULT_NODES,
                                 adaptive: bool = True, model: Optional[LatentVariableModel] = None) -> np.ndarray:
    model = model or build_model(dataset)
    _require_one_factor(model)
    prep = model.prepare(beta)
    terms, scale, _, _ = _node_log_terms(model, prep, dataset, nodes, adaptive)
    return np.log(scale) + logsumexp(terms, axis=1)


def quadrature_loglik_1d(dataset: Dataset, beta: ParamVector, nodes: int = DEFAULT_NODES,
                         adaptive: bool = True, model: Optional[LatentVariableModel] = None) -> float:
    """Gauss-Hermite marginal log-likelihood sum_i log int f_i(Y_i, xi | beta) dxi"""
    return float(quadrature_loglik_1d_per_obs(dataset, beta, nodes, adaptive, model).sum())


def quadrature_scores_1d(dataset: Dataset, beta: ParamVector, nodes: int = DEFAULT_NODES,
                         model: Optional[LatentVariableModel] = None) -> np.ndarray:
    """Per-observation marginal scores E[d log f_i / d beta | Y_i] by quadrature"""
    model = model or build_model(dataset)
    _require_one_factor(model)
    prep = model.prepare(beta)
    terms, _, points, rows = _node_log_terms(model, prep, dataset, nodes, adaptive=True)
    weights = np.exp(terms - logsumexp(terms, axis=1, keepdims=True))
    node_scores = model.grad_params(prep, points.reshape(-1, 1), dataset, rows)
    node_scores = node_scores.reshape(dataset.n_obs, nodes, model.n_params)
    return np.einsum("nq,nqp->np", weights, node_scores)


@dataclass
class QuadratureFit:
    beta: ParamVector
    loglik: float
    converged: bool
    iterations: int
    message: str = ""


def free_parameter_mask(model: LatentVariableModel) -> np.ndarray:
    """Parameters without an equality constraint; M2PL Cholesky rows live on unit spheres"""
    mask = np.ones(model.n_params, dtype=bool)
    if model.constrained:
        mask[model.layout.slice("chol")] = False
    return mask


def quadrature_mmle_1d(dataset: Dataset, beta0: ParamVector, nodes: int = DEFAULT_NODES,
                       max_iter: int = 500, model: Optional[LatentVariableModel] = None) -> QuadratureFit:
    """Direct maximisation of the quadrature log-likelihood with L-BFGS-B"""
    model = model or build_model(dataset)
    _require_one_factor(model)
    start = model.project(beta0)
    free = free_parameter_mask(model)
    bounds: List[Tuple[Optional[float], Optional[float]]] = [(None, None)] * int(free.sum())
    if not model.constrained:
        # every coordinate is free, so layout positions index the bounds directly
        bounds[model.layout.slice("chol").start] = (1e-6, None)
    N = dataset.n_obs

    def unpack(theta: np.ndarray) -> ParamVector:
        values = start.values.copy()
        values[free] = theta
        return ParamVector(values, model.layout)

    def objective(theta: np.ndarray):
        beta = unpack(theta)
        value = -quadrature_loglik_1d(dataset, beta, nodes, model=model) / N
        grad = -quadrature_scores_1d(dataset, beta, nodes, model=model).sum(axis=0)[free] / N
        return value, grad

    res = minimize(objective, start.values[free], jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": max_iter, "gtol": 1e-10, "ftol": 1e-14})
    beta = unpack(res.x)
    loglik = quadrature_loglik_1d(dataset, beta, nodes, model=model)
    logger.info(f"Quadrature MMLE: loglik {loglik:.6f} after {res.nit} iterations ({res.message})")
    return QuadratureFit(beta, loglik, bool(res.success), int(res.nit), str(res.message))


def log_mean_exp(values: np.ndarray, axis: int = -1) -> np.ndarray:
    values = np.asarray(values)
    return logsumexp(values, axis=axis) - math.log(values.shape[axis])
