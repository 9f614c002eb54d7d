import numpy as np
import pytest

from somala_models import Dataset, M2PLModel, MultilevelLogisticModel, chol_entries


def random_unit_chol(rng, n_factors):
    L = np.tril(rng.normal(size=(n_factors, n_factors)))
    L[np.diag_indices(n_factors)] = np.abs(np.diag(L)) + 0.5
    return L / np.linalg.norm(L, axis=1, keepdims=True)


def make_m2pl(rng, n_obs=20, n_items=8, n_factors=3):
    q = (rng.random((n_items, n_factors)) < 0.4).astype(int)
    q[np.arange(n_items), rng.integers(0, n_factors, n_items)] = 1
    y = rng.integers(0, 2, size=(n_obs, n_items))
    dataset = Dataset("m2pl", y, q_matrix=q)
    model = M2PLModel(q)
    beta = model.make_params({
        "d": rng.normal(size=n_items),
        "a": rng.uniform(0.5, 1.5, size=model.q_rows.size),
        "chol": chol_entries(random_unit_chol(rng, n_factors)),
    })
    xi = rng.normal(size=(n_obs, n_factors))
    return dataset, model, beta, xi


def make_multilevel(rng, n_obs=20, max_items=6, n_factors=3):
    responses, covariates = [], []
    for _ in range(n_obs):
        j = int(rng.integers(1, max_items + 1))
        x = np.hstack([np.ones((j, 1)), rng.normal(size=(j, n_factors - 1))])
        covariates.append(x)
        responses.append(rng.integers(0, 2, size=j))
    dataset = Dataset.from_groups(responses, covariates)
    model = MultilevelLogisticModel(n_factors)
    L = np.tril(rng.normal(scale=0.3, size=(n_factors, n_factors)))
    L[np.diag_indices(n_factors)] = np.abs(np.diag(L)) + 0.4
    beta = model.make_params({"mu": rng.normal(size=n_factors), "chol": chol_entries(L)})
    xi = beta.block("mu") + rng.normal(scale=0.5, size=(n_obs, n_factors))
    return dataset, model, beta, xi


def prior_only_m2pl(n_obs=1, n_factors=2):
    """M2PL with zero loadings: the latent posterior equals the N(0, I) prior"""
    q = np.ones((1, n_factors), dtype=int)
    dataset = Dataset("m2pl", np.ones((n_obs, 1)), q_matrix=q)
    model = M2PLModel(q)
    beta = model.make_params({"d": [0.0], "a": np.zeros(n_factors), "chol": chol_entries(np.eye(n_factors))})
    return dataset, model, beta


def central_difference(fun, x, eps=1e-5):
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for q in range(x.size):
        step = np.zeros_like(x)
        step[q] = eps
        grad[q] = (fun(x + step) - fun(x - step)) / (2.0 * eps)
    return grad


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def m2pl_instance(rng):
    return make_m2pl(rng)


@pytest.fixture
def multilevel_instance(rng):
    return make_multilevel(rng)


@pytest.fixture(params=["m2pl", "multilevel"])
def any_instance(request, rng):
    return make_m2pl(rng) if request.param == "m2pl" else make_multilevel(rng)
