#!/usr/bin/env python3
"""
Latent variable models with a Cholesky-parameterised Gaussian latent prior.

Two models are supported:

* multilevel logistic regression with random intercept and slopes,
  beta = (mu, chol), latent prior N(mu, L L^T), unconstrained parameter space;
* confirmatory M2PL item factor model, beta = (d, a, chol), latent prior
  N(0, L L^T) where every row of L has unit norm so that diag(Sigma) = 1.

All per-observation quantities are vectorised over a block of rows. A
``PreparedParams`` holds everything derived from beta once per parameter
update (L, L^{-1}, Sigma^{-1}, log|L|) and is shared read-only by every
gradient evaluation made with that beta.
"""
import logging
import math
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.linalg import cholesky, solve_triangular
from scipy.special import expit

logger = logging.getLogger(__name__)

CHOL_DIAG_MIN = 1e-12
ROW_NORM_MIN = 1e-12
# rows already this close to unit norm are left untouched, which makes
# project() idempotent bit-for-bit
UNIT_NORM_TOL = 1e-14
# a Cholesky row step may shrink its diagonal entry to at most this fraction
DIAGONAL_KEEP = 0.5
LOG_2PI = math.log(2.0 * math.pi)

ModelKind = Literal["multilevel", "m2pl"]


class SomalaError(Exception):
    """Base class for all somala failures"""


class DataValidationError(SomalaError, ValueError):
    """Inputs with inconsistent shapes, values or layouts"""


class NumericalDivergenceError(SomalaError, ArithmeticError):
    """A run produced non-finite or exploding quantities"""

    def __init__(self, message: str, last_checkpoint=None, checkpoints=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
        self.checkpoints = checkpoints or []


class EstimationError(SomalaError, RuntimeError):
    """A post-fit estimator cannot be computed from the given inputs"""


# ---------------------------------------------------------------------------
# Parameter vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamLayout:
    """Named contiguous blocks of the flat parameter vector"""
    blocks: Tuple[Tuple[str, int, int], ...]
    labels: Tuple[str, ...]

    def __post_init__(self):
        position = 0
        for name, start, stop in self.blocks:
            if start != position or stop < start:
                raise DataValidationError(f"Block '{name}' does not continue the layout at {position}")
            position = stop
        if position != len(self.labels):
            raise DataValidationError("Layout labels do not cover every coordinate")

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def names(self) -> List[str]:
        return [name for name, _, _ in self.blocks]

    def slice(self, name: str) -> slice:
        for block, start, stop in self.blocks:
            if block == name:
                return slice(start, stop)
        raise DataValidationError(f"Layout has no block '{name}' (blocks: {self.names})")


@dataclass
class ParamVector:
    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 or self.values.size != self.layout.size:
            raise DataValidationError(
                f"Parameter vector has length {self.values.size}, layout expects {self.layout.size}")

    def block(self, name: str) -> np.ndarray:
        return self.values[self.layout.slice(name)]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def to_blocks(self) -> Dict[str, List[float]]:
        return {name: self.block(name).tolist() for name in self.layout.names}


# Latent samples are plain (N, K) float arrays; this alias names them.
LatentState = np.ndarray


# ---------------------------------------------------------------------------
# Cholesky helpers
# ---------------------------------------------------------------------------

def chol_size(n_factors: int) -> int:
    return n_factors * (n_factors + 1) // 2


def chol_from_entries(entries: np.ndarray, n_factors: int) -> np.ndarray:
    """Lower-triangular L from its row-major lower-triangle entries"""
    L = np.zeros((n_factors, n_factors))
    L[np.tril_indices(n_factors)] = entries
    return L


def chol_entries(L: np.ndarray) -> np.ndarray:
    return np.asarray(L, dtype=float)[np.tril_indices(L.shape[0])]


def sigma_from_chol(L: np.ndarray) -> np.ndarray:
    """Sigma = L L^T, symmetrised"""
    L = np.tril(np.asarray(L, dtype=float))
    sigma = L @ L.T
    return 0.5 * (sigma + sigma.T)


def cholesky_factor(sigma: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor with positive diagonal"""
    try:
        return cholesky(np.asarray(sigma, dtype=float), lower=True)
    except np.linalg.LinAlgError as e:
        raise DataValidationError(f"Matrix is not positive definite: {e}")


def nearest_correlation_chol(matrix: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Cholesky factor of a valid correlation matrix close to ``matrix``"""
    sym = 0.5 * (matrix + matrix.T)
    eigvals, eigvecs = np.linalg.eigh(sym)
    repaired = (eigvecs * np.maximum(eigvals, floor)) @ eigvecs.T
    scale = np.sqrt(np.diag(repaired))
    corr = repaired / np.outer(scale, scale)
    L = cholesky_factor(corr)
    return L / np.linalg.norm(L, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Observed data for one model.

    M2PL: ``responses`` is N x J, ``q_matrix`` is J x K.
    Multilevel: ``responses`` is N x J_max padded with zeros, ``covariates`` is
    N x J_max x K and ``mask`` marks the J_i real level-1 cells of each row.
    """
    kind: ModelKind
    responses: np.ndarray
    covariates: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    q_matrix: Optional[np.ndarray] = None

    def __post_init__(self):
        self.responses = np.asarray(self.responses, dtype=float)
        if self.responses.ndim != 2:
            raise DataValidationError("Responses must be a 2-D array")
        if self.kind == "m2pl":
            self._validate_m2pl()
        elif self.kind == "multilevel":
            self._validate_multilevel()
        else:
            raise DataValidationError(f"Unknown model kind '{self.kind}'")

    def _validate_m2pl(self):
        if self.q_matrix is None:
            raise DataValidationError("M2PL data needs a Q-matrix")
        self.q_matrix = np.asarray(self.q_matrix, dtype=int)
        if self.q_matrix.ndim != 2 or self.q_matrix.shape[0] != self.responses.shape[1]:
            raise DataValidationError(
                f"Q-matrix shape {self.q_matrix.shape} does not match {self.responses.shape[1]} items")
        if not np.isin(self.q_matrix, (0, 1)).all():
            raise DataValidationError("Q-matrix entries must be 0 or 1")
        if (self.q_matrix.sum(axis=1) == 0).any():
            empty = np.flatnonzero(self.q_matrix.sum(axis=1) == 0).tolist()
            raise DataValidationError(f"Items {empty} load on no factor")
        if not np.isin(self.responses, (0.0, 1.0)).all():
            raise DataValidationError("Responses must be 0 or 1")
        means = self.responses.mean(axis=0)
        degenerate = np.flatnonzero((means == 0.0) | (means == 1.0))
        if degenerate.size:
            logger.warning(f"Items {degenerate.tolist()} were answered identically by every respondent; "
                           f"their intercepts may diverge")

    def _validate_multilevel(self):
        if self.covariates is None:
            raise DataValidationError("Multilevel data needs covariates")
        self.covariates = np.asarray(self.covariates, dtype=float)
        if self.mask is None:
            self.mask = np.ones(self.responses.shape, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.covariates.shape[:2] != self.responses.shape or self.mask.shape != self.responses.shape:
            raise DataValidationError("Covariates, mask and responses disagree in shape")
        if not np.isin(self.responses[self.mask], (0.0, 1.0)).all():
            raise DataValidationError("Responses must be 0 or 1")
        if not np.all(self.covariates[..., 0][self.mask] == 1.0):
            raise DataValidationError("The first covariate must be 1 (random intercept)")
        if (self.mask.sum(axis=1) == 0).any():
            raise DataValidationError("Every level-2 unit needs at least one level-1 response")
        observed = self.responses[self.mask]
        if observed.size and (observed.min() == observed.max()):
            logger.warning("Every response in the dataset is identical; estimates may diverge")

    @classmethod
    def from_groups(cls, responses: Sequence[np.ndarray], covariates: Sequence[np.ndarray]) -> "Dataset":
        """Build multilevel data from ragged per-unit arrays"""
        if len(responses) != len(covariates) or not responses:
            raise DataValidationError("Need one covariate matrix per level-2 unit")
        n_factors = np.asarray(covariates[0]).shape[1]
        j_max = max(len(y) for y in responses)
        n_obs = len(responses)
        y_pad = np.zeros((n_obs, j_max))
        x_pad = np.zeros((n_obs, j_max, n_factors))
        x_pad[..., 0] = 1.0
        mask = np.zeros((n_obs, j_max), dtype=bool)
        for i, (y, x) in enumerate(zip(responses, covariates)):
            x = np.asarray(x, dtype=float)
            if x.shape != (len(y), n_factors):
                raise DataValidationError(f"Unit {i}: covariates {x.shape} vs {len(y)} responses")
            y_pad[i, :len(y)] = y
            x_pad[i, :len(y)] = x
            mask[i, :len(y)] = True
        return cls(kind="multilevel", responses=y_pad, covariates=x_pad, mask=mask)

    @property
    def n_obs(self) -> int:
        return self.responses.shape[0]

    @property
    def n_items(self) -> int:
        return self.responses.shape[1]

    @property
    def n_factors(self) -> int:
        if self.kind == "m2pl":
            return self.q_matrix.shape[1]
        return self.covariates.shape[2]


def check_latent(xi: np.ndarray, dataset: Dataset) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (dataset.n_obs, dataset.n_factors):
        raise DataValidationError(f"Latent state {xi.shape} does not match ({dataset.n_obs}, {dataset.n_factors})")
    if not np.isfinite(xi).all():
        raise DataValidationError("Latent state has non-finite entries")
    return xi


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PreparedParams:
    """Quantities derived from beta once per parameter update"""
    beta: ParamVector
    chol: np.ndarray
    chol_inv: np.ndarray
    sigma_inv: np.ndarray
    log_det_chol: float
    mean: np.ndarray
    intercepts: Optional[np.ndarray] = None
    loadings: Optional[np.ndarray] = None


Rows = Optional[Union[np.ndarray, Sequence[int]]]


class LatentVariableModel:
    """Shared machinery: Gaussian latent prior parameterised by a Cholesky block"""

    kind: ModelKind = None
    constrained = False

    def __init__(self, n_factors: int):
        if n_factors < 1:
            raise DataValidationError("Need at least one latent factor")
        self.n_factors = n_factors
        self._tril = np.tril_indices(n_factors)
        self.layout = self._build_layout()

    # --- layout -----------------------------------------------------------

    def _build_layout(self) -> ParamLayout:
        raise NotImplementedError

    def _chol_labels(self) -> List[str]:
        return [f"chol[{k},{kk}]" for k, kk in zip(*self._tril)]

    @property
    def n_params(self) -> int:
        return self.layout.size

    def make_params(self, blocks: Dict[str, Sequence[float]]) -> ParamVector:
        values = np.zeros(self.layout.size)
        for name in self.layout.names:
            if name not in blocks:
                raise DataValidationError(f"Missing parameter block '{name}'")
            block = np.asarray(blocks[name], dtype=float).ravel()
            target = self.layout.slice(name)
            if block.size != target.stop - target.start:
                raise DataValidationError(
                    f"Block '{name}' has {block.size} values, expected {target.stop - target.start}")
            values[target] = block
        return ParamVector(values, self.layout)

    def check_params(self, beta: ParamVector) -> ParamVector:
        if beta.layout != self.layout:
            raise DataValidationError("Parameter layout does not belong to this model")
        return beta

    def rescale_vector(self, block_rescale: Optional[Dict[str, float]]) -> np.ndarray:
        """Per-coordinate step rescaling from named block factors"""
        factors = np.ones(self.layout.size)
        aliases = {"sigma": "chol", "covariance": "chol", "correlation": "chol"}
        for name, factor in (block_rescale or {}).items():
            if factor <= 0:
                raise DataValidationError(f"Rescale factor for '{name}' must be positive")
            factors[self.layout.slice(aliases.get(name, name))] = factor
        return factors

    # --- prior ------------------------------------------------------------

    def chol_of(self, beta: ParamVector) -> np.ndarray:
        return chol_from_entries(beta.block("chol"), self.n_factors)

    def sigma(self, beta: ParamVector) -> np.ndarray:
        return sigma_from_chol(self.chol_of(beta))

    def prior_mean(self, beta: ParamVector) -> np.ndarray:
        return np.zeros(self.n_factors)

    def prepare(self, beta: ParamVector) -> PreparedParams:
        """Invert Sigma through its triangular factor, once per update"""
        self.check_params(beta)
        L = self.chol_of(beta)
        diag = np.abs(np.diag(L))
        if not np.isfinite(L).all() or diag.min() < CHOL_DIAG_MIN:
            raise NumericalDivergenceError(
                f"Singular latent covariance: Cholesky diagonal {np.diag(L).tolist()}")
        L_inv = solve_triangular(L, np.eye(self.n_factors), lower=True)
        sigma_inv = L_inv.T @ L_inv
        return PreparedParams(
            beta=beta,
            chol=L,
            chol_inv=L_inv,
            sigma_inv=0.5 * (sigma_inv + sigma_inv.T),
            log_det_chol=float(np.log(diag).sum()),
            mean=self.prior_mean(beta),
            **self._prepare_extra(beta),
        )

    def _prepare_extra(self, beta: ParamVector) -> Dict[str, np.ndarray]:
        return {}

    def prior_logpdf(self, prep: PreparedParams, xi: np.ndarray) -> np.ndarray:
        resid = np.atleast_2d(xi) - prep.mean
        z = resid @ prep.chol_inv.T
        return -0.5 * self.n_factors * LOG_2PI - prep.log_det_chol - 0.5 * np.sum(z * z, axis=1)

    # --- data term (model specific) --------------------------------------

    def _eta(self, prep: PreparedParams, xi: np.ndarray, dataset: Dataset, rows: np.ndarray):
        """Linear predictor, responses and cell mask for the given rows"""
        raise NotImplementedError

    def _rows(self, dataset: Dataset, rows: Rows, xi: np.ndarray) -> np.ndarray:
        if rows is None:
            rows = np.arange(dataset.n_obs)
        rows = np.asarray(rows, dtype=int)
        if np.atleast_2d(xi).shape[0] != rows.size:
            raise DataValidationError(f"{np.atleast_2d(xi).shape[0]} latent rows for {rows.size} observations")
        return rows

    def conditional_loglik(self, prep: PreparedParams, xi: np.ndarray, dataset: Dataset,
                           rows: Rows = None) -> np.ndarray:
        """log p(Y_i | xi_i, beta) per row"""
        xi = np.atleast_2d(xi)
        rows = self._rows(dataset, rows, xi)
        eta, y, mask = self._eta(prep, xi, dataset, rows)
        cell = y * eta - np.logaddexp(0.0, eta)
        if mask is not None:
            cell = np.where(mask, cell, 0.0)
        return cell.sum(axis=1)

    def complete_data_loglik(self, prep: PreparedParams, xi: np.ndarray, dataset: Dataset,
                             rows: Rows = None) -> np.ndarray:
        """log f_i(Y_i, xi_i | beta) per row"""
        xi = np.atleast_2d(xi)
        return self.conditional_loglik(prep, xi, dataset, rows) + self.prior_logpdf(prep, xi)

    def _residual_term(self, prep, xi, dataset, rows) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        eta, y, mask = self._eta(prep, xi, dataset, rows)
        prob = expit(eta)
        resid = prob - y
        if mask is not None:
            resid = np.where(mask, resid, 0.0)
            prob = np.where(mask, prob, 0.0)
        return resid, prob, mask

    def grad_latent(self, prep: PreparedParams, xi: np.ndarray, dataset: Dataset,
                    rows: Rows = None) -> np.ndarray:
        """Gradient of the potential U_i = -log f_i with respect to xi_i"""
        raise NotImplementedError

    def grad_params(self, prep: PreparedParams, xi: np.ndarray, dataset: Dataset,
                    rows: Rows = None) -> np.ndarray:
        """Per-row score d log f_i / d beta, shape (rows, p)"""
        raise NotImplementedError

    def hessian_diag(self, prep: PreparedParams, xi: np.ndarray, dataset: Dataset,
                     rows: Rows = None) -> np.ndarray:
        """Per-row diagonal of d^2 log f_i / d beta^2, shape (rows, p)"""
        raise NotImplementedError

    def _chol_grad(self, prep: PreparedParams, resid: np.ndarray) -> np.ndarray:
        # d/dL log N(xi | m, L L^T) = tril((s s^T - Sigma^{-1}) L),  s = Sigma^{-1}(xi - m)
        s = resid @ prep.sigma_inv
        u = s @ prep.chol
        full = s[:, :, None] * u[:, None, :] - (prep.sigma_inv @ prep.chol)[None, :, :]
        return full[:, self._tril[0], self._tril[1]]

    def _chol_hessian_diag(self, prep: PreparedParams, resid: np.ndarray) -> np.ndarray:
        # with z = L^{-1}(xi - m) and w_a the a-th column of L^{-1}:
        # d2/dl_ab^2 = [a == b](1/l_aa^2 - 2 z_a (w_a . z) / l_aa) - z_b^2 |w_a|^2
        W = prep.chol_inv
        z = resid @ W.T
        wz = z @ W
        col_norm2 = np.sum(W * W, axis=0)
        rows_a, cols_b = self._tril
        out = -(z[:, cols_b] ** 2) * col_norm2[rows_a]
        diag_pos = np.flatnonzero(rows_a == cols_b)
        diag_idx = rows_a[diag_pos]
        l_diag = np.diag(prep.chol)[diag_idx]
        out[:, diag_pos] += 1.0 / l_diag ** 2 - 2.0 * z[:, diag_idx] * wz[:, diag_idx] / l_diag
        return out

    # --- constraints ------------------------------------------------------

    def project(self, beta: ParamVector) -> ParamVector:
        return beta

    def constraint_violation(self, beta: ParamVector) -> float:
        return 0.0

    def tie_qn_diagonal(self, d_diag: np.ndarray) -> np.ndarray:
        return d_diag

    def tangent_step(self, beta: ParamVector, step: np.ndarray) -> np.ndarray:
        return step

    def negative_chol_diagonal(self, beta: ParamVector) -> bool:
        return bool((np.diag(self.chol_of(beta)) <= 0).any())


class MultilevelLogisticModel(LatentVariableModel):
    """Two-level logistic regression, P(Y_ij = 1 | xi_i) = logistic(x_ij . xi_i)"""

    kind = "multilevel"

    def _build_layout(self) -> ParamLayout:
        K = self.n_factors
        labels = [f"mu[{k}]" for k in range(K)] + self._chol_labels()
        return ParamLayout((("mu", 0, K), ("chol", K, K + chol_size(K))), tuple(labels))

    def prior_mean(self, beta: ParamVector) -> np.ndarray:
        return beta.block("mu").copy()

    def _eta(self, prep, xi, dataset, rows):
        x = dataset.covariates[rows]
        eta = np.einsum("mjk,mk->mj", x, xi)
        return eta, dataset.responses[rows], dataset.mask[rows]

    def grad_latent(self, prep, xi, dataset, rows=None):
        xi = np.atleast_2d(xi)
        rows = self._rows(dataset, rows, xi)
        resid, _, _ = self._residual_term(prep, xi, dataset, rows)
        data_term = np.einsum("mj,mjk->mk", resid, dataset.covariates[rows])
        return data_term + (xi - prep.mean) @ prep.sigma_inv

    def grad_params(self, prep, xi, dataset, rows=None):
        xi = np.atleast_2d(xi)
        self._rows(dataset, rows, xi)
        resid = xi - prep.mean
        grad_mu = resid @ prep.sigma_inv
        return np.hstack([grad_mu, self._chol_grad(prep, resid)])

    def hessian_diag(self, prep, xi, dataset, rows=None):
        xi = np.atleast_2d(xi)
        self._rows(dataset, rows, xi)
        resid = xi - prep.mean
        mu_diag = np.broadcast_to(-np.diag(prep.sigma_inv), resid.shape)
        return np.hstack([mu_diag, self._chol_hessian_diag(prep, resid)])


class M2PLModel(LatentVariableModel):
    """Confirmatory M2PL, P(Y_ij = 1 | xi_i) = logistic(d_j + a_j . xi_i)"""

    kind = "m2pl"
    constrained = True

    def __init__(self, q_matrix: np.ndarray):
        self.q_matrix = np.asarray(q_matrix, dtype=int)
        if self.q_matrix.ndim != 2:
            raise DataValidationError("Q-matrix must be 2-D")
        self.n_items = self.q_matrix.shape[0]
        self.q_rows, self.q_cols = np.nonzero(self.q_matrix)
        super().__init__(self.q_matrix.shape[1])
        self._row_of_entry = self._tril[0]

    def _build_layout(self) -> ParamLayout:
        J, nq = self.n_items, self.q_rows.size
        labels = ([f"d[{j}]" for j in range(J)]
                  + [f"a[{j},{k}]" for j, k in zip(self.q_rows, self.q_cols)]
                  + self._chol_labels())
        blocks = (("d", 0, J), ("a", J, J + nq), ("chol", J + nq, J + nq + chol_size(self.n_factors)))
        return ParamLayout(blocks, tuple(labels))

    def loading_matrix(self, beta: ParamVector) -> np.ndarray:
        A = np.zeros((self.n_items, self.n_factors))
        A[self.q_rows, self.q_cols] = beta.block("a")
        return A

    def _prepare_extra(self, beta):
        return {"intercepts": beta.block("d").copy(), "loadings": self.loading_matrix(beta)}

    def _eta(self, prep, xi, dataset, rows):
        eta = xi @ prep.loadings.T + prep.intercepts
        return eta, dataset.responses[rows], None

    def grad_latent(self, prep, xi, dataset, rows=None):
        xi = np.atleast_2d(xi)
        rows = self._rows(dataset, rows, xi)
        resid, _, _ = self._residual_term(prep, xi, dataset, rows)
        return resid @ prep.loadings + xi @ prep.sigma_inv

    def grad_params(self, prep, xi, dataset, rows=None):
        xi = np.atleast_2d(xi)
        rows = self._rows(dataset, rows, xi)
        resid, _, _ = self._residual_term(prep, xi, dataset, rows)
        score = -resid
        grad_a = score[:, self.q_rows] * xi[:, self.q_cols]
        return np.hstack([score, grad_a, self._chol_grad(prep, xi)])

    def hessian_diag(self, prep, xi, dataset, rows=None):
        xi = np.atleast_2d(xi)
        rows = self._rows(dataset, rows, xi)
        _, prob, _ = self._residual_term(prep, xi, dataset, rows)
        weight = -prob * (1.0 - prob)
        h_a = weight[:, self.q_rows] * xi[:, self.q_cols] ** 2
        return np.hstack([weight, h_a, self._chol_hessian_diag(prep, xi)])

    def project(self, beta: ParamVector) -> ParamVector:
        """Rescale every Cholesky row to unit norm"""
        self.check_params(beta)
        L = self.chol_of(beta)
        norms = np.linalg.norm(L, axis=1)
        if not np.isfinite(norms).all() or norms.min() < ROW_NORM_MIN:
            raise NumericalDivergenceError(f"Degenerate Cholesky row (row norms {norms.tolist()})")
        needs = np.abs(norms - 1.0) > UNIT_NORM_TOL
        if not needs.any():
            return beta
        L[needs] = L[needs] / norms[needs, None]
        values = beta.values.copy()
        values[self.layout.slice("chol")] = chol_entries(L)
        return ParamVector(values, self.layout)

    def constraint_violation(self, beta: ParamVector) -> float:
        return float(np.max(np.abs(np.linalg.norm(self.chol_of(beta), axis=1) - 1.0)))

    def tangent_step(self, beta: ParamVector, step: np.ndarray) -> np.ndarray:
        """Restrict a parameter step to the unit-row-norm manifold.

        The radial part of every Cholesky row is removed, so row 0 never moves
        and row normalisation only undoes second-order drift. A row whose step
        would take its diagonal entry across zero (or below DIAGONAL_KEEP of
        its value) is shortened until the diagonal keeps that fraction.
        """
        step = np.array(step, dtype=float)
        L = self.chol_of(beta)
        norms = np.linalg.norm(L, axis=1)
        if not np.isfinite(norms).all() or norms.min() < ROW_NORM_MIN:
            raise NumericalDivergenceError(f"Degenerate Cholesky row (row norms {norms.tolist()})")
        U = L / norms[:, None]
        S = chol_from_entries(step[self.layout.slice("chol")], self.n_factors)
        S -= np.sum(S * U, axis=1)[:, None] * U

        diag = np.diag(L)
        moved = np.diag(S)
        limit = (DIAGONAL_KEEP - 1.0) * diag
        shrink = np.ones(self.n_factors)
        toward_zero = moved * diag < 0
        too_far = toward_zero & (np.abs(moved) > np.abs(limit))
        shrink[too_far] = limit[too_far] / moved[too_far]
        S *= shrink[:, None]

        step[self.layout.slice("chol")] = chol_entries(S)
        return step

    def tie_qn_diagonal(self, d_diag: np.ndarray) -> np.ndarray:
        """Equalise D within each Cholesky row so row normalisation is the exact D-projection"""
        out = d_diag.copy()
        block = out[self.layout.slice("chol")]
        row_mean = np.bincount(self._row_of_entry, weights=block) / np.bincount(self._row_of_entry)
        out[self.layout.slice("chol")] = row_mean[self._row_of_entry]
        return out


def build_model(dataset: Dataset) -> LatentVariableModel:
    if dataset.kind == "m2pl":
        return M2PLModel(dataset.q_matrix)
    return MultilevelLogisticModel(dataset.n_factors)


# ---------------------------------------------------------------------------
# Single-observation operations
# ---------------------------------------------------------------------------

def single_latent(xi_i: np.ndarray, n_factors: int) -> np.ndarray:
    xi_i = np.asarray(xi_i, dtype=float).reshape(1, -1)
    if xi_i.shape[1] != n_factors:
        raise DataValidationError(f"Latent vector has {xi_i.shape[1]} entries, model has {n_factors} factors")
    if not np.isfinite(xi_i).all():
        raise DataValidationError("Latent vector has non-finite entries")
    return xi_i


def complete_data_loglik(beta: ParamVector, xi_i: np.ndarray, dataset: Dataset, i: int) -> float:
    model = build_model(dataset)
    xi_row = single_latent(xi_i, model.n_factors)
    return float(model.complete_data_loglik(model.prepare(beta), xi_row, dataset, [i])[0])


def grad_latent(beta: ParamVector, xi_i: np.ndarray, dataset: Dataset, i: int) -> np.ndarray:
    model = build_model(dataset)
    xi_row = single_latent(xi_i, model.n_factors)
    return model.grad_latent(model.prepare(beta), xi_row, dataset, [i])[0]


def grad_params(beta: ParamVector, xi_i: np.ndarray, dataset: Dataset, i: int) -> np.ndarray:
    model = build_model(dataset)
    xi_row = single_latent(xi_i, model.n_factors)
    return model.grad_params(model.prepare(beta), xi_row, dataset, [i])[0]


def project(beta: ParamVector, model: LatentVariableModel) -> ParamVector:
    return model.project(beta)


# ---------------------------------------------------------------------------
# Simulation designs
# ---------------------------------------------------------------------------

MULTILEVEL_TRUE_MEANS = {
    5: (0.300, 1.060, 0.950, 0.129, 0.826),
    10: (0.300, 1.060, 0.950, 0.129, 0.826, 0.857, 0.193, 0.809, 0.844, 0.301),
}


class SimSetting(BaseModel):
    """A simulation design; the four built-ins are in BUILTIN_SETTINGS"""
    name: str = "custom"
    model: ModelKind
    n_obs: int = Field(10_000, ge=1)
    n_items: int = Field(..., ge=1)
    n_factors: int = Field(..., ge=1)
    mu: Optional[List[float]] = None
    sigma_diag: float = Field(..., gt=0)
    sigma_offdiag: float
    covariate_corr: float = 0.25
    fixed_intercept: float = 0.3
    slope_range: Tuple[float, float] = (0.1, 1.1)
    intercept_range: Tuple[float, float] = (-1.0, 1.0)
    loading_range: Tuple[float, float] = (0.5, 1.5)
    q_matrix: Optional[List[List[int]]] = None
    n_triple_rows: Optional[int] = None
    # true item parameters and the random Q rows are fixed across replications
    structure_seed: int = 0

    @model_validator(mode="after")
    def _check_shapes(self):
        K = self.n_factors
        if self.mu is not None and len(self.mu) != K:
            raise ValueError(f"mu has {len(self.mu)} entries for {K} factors")
        if self.model == "m2pl":
            if self.q_matrix is not None:
                q = np.asarray(self.q_matrix)
                if q.shape != (self.n_items, K):
                    raise ValueError(f"Q-matrix shape {q.shape} != ({self.n_items}, {K})")
            else:
                base = 3 * K + 3 * math.comb(K, 2)
                triples = self.n_items - base
                if triples < 0 or triples > math.comb(K, 3):
                    raise ValueError(f"J={self.n_items} cannot be built from the standard Q design with K={K}")
                if self.n_triple_rows is not None and self.n_triple_rows != triples:
                    raise ValueError("n_triple_rows inconsistent with n_items")
        return self

    def sigma(self) -> np.ndarray:
        K = self.n_factors
        return np.full((K, K), self.sigma_offdiag) + np.eye(K) * (self.sigma_diag - self.sigma_offdiag)


BUILTIN_SETTINGS: Dict[str, SimSetting] = {
    "multilevel-k5": SimSetting(name="multilevel-k5", model="multilevel", n_items=10, n_factors=5,
                                mu=list(MULTILEVEL_TRUE_MEANS[5]), sigma_diag=0.1, sigma_offdiag=0.05),
    "multilevel-k10": SimSetting(name="multilevel-k10", model="multilevel", n_items=20, n_factors=10,
                                 mu=list(MULTILEVEL_TRUE_MEANS[10]), sigma_diag=0.1, sigma_offdiag=0.05),
    "m2pl-k5": SimSetting(name="m2pl-k5", model="m2pl", n_items=50, n_factors=5,
                          sigma_diag=1.0, sigma_offdiag=0.5),
    "m2pl-k10": SimSetting(name="m2pl-k10", model="m2pl", n_items=200, n_factors=10,
                           sigma_diag=1.0, sigma_offdiag=0.5),
}


def get_setting(name: str, **overrides) -> SimSetting:
    if name not in BUILTIN_SETTINGS:
        raise DataValidationError(f"Unknown setting '{name}' (known: {', '.join(BUILTIN_SETTINGS)})")
    setting = BUILTIN_SETTINGS[name]
    if overrides:
        setting = SimSetting.model_validate({**setting.model_dump(), **overrides})
    return setting


def build_q_matrix(n_factors: int, n_triple_rows: int, rng: np.random.Generator) -> np.ndarray:
    """Three identity blocks, three copies of every two-factor pattern, then
    ``n_triple_rows`` distinct three-factor patterns drawn at random"""
    K = n_factors
    rows = [np.eye(K, dtype=int)] * 3
    pairs = np.zeros((math.comb(K, 2), K), dtype=int)
    for r, (k1, k2) in enumerate(combinations(range(K), 2)):
        pairs[r, [k1, k2]] = 1
    rows += [pairs] * 3
    triples = list(combinations(range(K), 3))
    if n_triple_rows > len(triples):
        raise DataValidationError(f"Only {len(triples)} three-factor patterns exist for K={K}")
    if n_triple_rows:
        chosen = sorted(rng.choice(len(triples), size=n_triple_rows, replace=False))
        block = np.zeros((n_triple_rows, K), dtype=int)
        for r, c in enumerate(chosen):
            block[r, list(triples[c])] = 1
        rows.append(block)
    return np.vstack(rows)


def true_parameters(setting: SimSetting) -> Tuple[LatentVariableModel, ParamVector]:
    """True beta for a design; depends only on ``structure_seed``"""
    rng = np.random.default_rng([setting.structure_seed, 17])
    K = setting.n_factors
    L = cholesky_factor(setting.sigma())
    if setting.model == "multilevel":
        model = MultilevelLogisticModel(K)
        if setting.mu is not None:
            mu = np.asarray(setting.mu, dtype=float)
        else:
            mu = np.concatenate([[setting.fixed_intercept], rng.uniform(*setting.slope_range, size=K - 1)])
        return model, model.make_params({"mu": mu, "chol": chol_entries(L)})
    if setting.q_matrix is not None:
        q = np.asarray(setting.q_matrix, dtype=int)
    else:
        q = build_q_matrix(K, setting.n_items - 3 * K - 3 * math.comb(K, 2), rng)
    model = M2PLModel(q)
    d = rng.uniform(*setting.intercept_range, size=setting.n_items)
    a = rng.uniform(*setting.loading_range, size=model.q_rows.size)
    return model, model.make_params({"d": d, "a": a, "chol": chol_entries(L)})


def simulate_dataset(setting: SimSetting, seed: int) -> Tuple[Dataset, ParamVector, LatentState]:
    """Draw one dataset; identical seeds give bit-identical outputs"""
    model, beta = true_parameters(setting)
    rng = np.random.default_rng(seed)
    N, J, K = setting.n_obs, setting.n_items, setting.n_factors
    prep = model.prepare(beta)
    xi = prep.mean + rng.standard_normal((N, K)) @ prep.chol.T
    if setting.model == "multilevel":
        x = np.ones((N, J, K))
        if K > 1:
            corr = np.full((K - 1, K - 1), setting.covariate_corr) + np.eye(K - 1) * (1 - setting.covariate_corr)
            x[..., 1:] = rng.standard_normal((N, J, K - 1)) @ cholesky_factor(corr).T
        eta = np.einsum("njk,nk->nj", x, xi)
        y = (rng.random((N, J)) < expit(eta)).astype(float)
        dataset = Dataset("multilevel", y, covariates=x, mask=np.ones((N, J), dtype=bool))
    else:
        eta = xi @ prep.loadings.T + prep.intercepts
        y = (rng.random((N, J)) < expit(eta)).astype(float)
        dataset = Dataset("m2pl", y, q_matrix=model.q_matrix)
    logger.info(f"Simulated {setting.name}: N={N}, J={J}, K={K}, p={model.n_params}, seed={seed}")
    return dataset, beta, xi


# ---------------------------------------------------------------------------
# Initial values
# ---------------------------------------------------------------------------

def _sign_matched(draw: np.ndarray, truth: np.ndarray) -> np.ndarray:
    # zero truths carry no sign; those draws are kept as drawn
    sign = np.sign(truth)
    return np.where(sign != 0, np.abs(draw) * sign, draw)


def initial_values(model: LatentVariableModel, dataset: Dataset, seed: int,
                   mode: Literal["simulation", "sumscore"] = "simulation",
                   true_xi: Optional[np.ndarray] = None) -> Tuple[ParamVector, LatentState]:
    rng = np.random.default_rng([seed, 29])
    N, K = dataset.n_obs, model.n_factors
    identity = chol_entries(np.eye(K))

    if mode == "simulation":
        if true_xi is None:
            raise DataValidationError("Simulation-mode initial values need the true latent values")
        true_xi = check_latent(true_xi, dataset)
        if model.kind == "multilevel":
            xi0 = _sign_matched(rng.normal(0.0, math.sqrt(0.5), size=(N, K)), true_xi)
            beta0 = model.make_params({"mu": rng.uniform(0.0, 1.5, size=K), "chol": identity})
        else:
            xi0 = _sign_matched(rng.normal(0.0, math.sqrt(5.0), size=(N, K)), true_xi)
            beta0 = model.make_params({
                "d": rng.standard_normal(model.n_items),
                "a": rng.uniform(0.0, 2.0, size=model.q_rows.size),
                "chol": identity,
            })
        return beta0, xi0

    if mode != "sumscore":
        raise DataValidationError(f"Unknown initialisation mode '{mode}'")
    if model.kind != "m2pl":
        raise DataValidationError("Sum-score initial values are defined for the M2PL model only")
    counts = model.q_matrix.sum(axis=0)
    if (counts == 0).any():
        raise DataValidationError(f"Factors {np.flatnonzero(counts == 0).tolist()} are measured by no item")
    scores = dataset.responses @ model.q_matrix
    sd = scores.std(axis=0)
    if (sd == 0).any():
        logger.warning(f"Sum scores of factors {np.flatnonzero(sd == 0).tolist()} have zero variance")
    xi0 = (scores - scores.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    if K == 1:
        L0 = np.eye(1)
    else:
        corr = np.corrcoef(xi0, rowvar=False)
        L0 = nearest_correlation_chol(np.nan_to_num(corr, nan=0.0) + np.diag(np.isnan(np.diag(corr)) * 1.0))
    beta0 = model.make_params({"d": np.zeros(model.n_items), "a": np.ones(model.q_rows.size),
                               "chol": chol_entries(L0)})
    return model.project(beta0), xi0
