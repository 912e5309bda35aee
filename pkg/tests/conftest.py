import numpy as np
import pytest

from peg import Dataset, ModelIndexSet, PropensityModel, fit_propensity


def make_dataset(rng, n=40, j=4, k=5, psi=None, delta=None, noise=1.0,
                 binary_col=None):
    """Balanced synthetic dataset from a correctly specified linear model."""
    h = np.concatenate([np.ones((n, j, 1)), rng.standard_normal((n, j, k - 1))],
                       axis=2)
    if binary_col is not None:
        h[:, :, binary_col] = (h[:, :, binary_col] > 0).astype(float)
    a = (rng.random((n, j)) < 0.5).astype(float)
    if psi is None:
        psi = np.zeros(k)
        psi[0] = 1.0
        if k > 1:
            psi[1] = 0.8
    if delta is None:
        delta = rng.standard_normal(k)
    y = (np.einsum("njk,k->nj", h, delta)
         + a * np.einsum("njk,k->nj", h, psi)
         + noise * rng.standard_normal((n, j)))
    return Dataset.from_arrays(y, a, h), np.asarray(delta, float), np.asarray(psi, float)


def stub_propensity(d, e_value=0.5):
    """Propensity model with fixed scores, for hand-computable matrices."""
    e = tuple(np.full(len(yi), e_value) for yi in d.y)
    return PropensityModel(beta=np.zeros(1), columns=ModelIndexSet((0,)),
                           e=e, iterations=0, loglik_path=())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_fit_inputs(rng):
    d, delta, psi = make_dataset(rng, n=60, j=4, k=6)
    pm = fit_propensity(d)
    return d, pm, delta, psi
