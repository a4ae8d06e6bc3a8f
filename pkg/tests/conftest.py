import numpy as np
import pytest

from fimlfa import FactorModel, ObservedDataset


def random_model(rng, p, m, psi_low=0.2, psi_high=1.5):
    """A well-conditioned random model; loadings kept moderate so test
    instances stay identified."""
    return FactorModel(
        mu=rng.normal(0.0, 2.0, size=p),
        loadings=rng.normal(0.0, 0.6, size=(p, m)),
        psi=rng.uniform(psi_low, psi_high, size=p),
    )


def random_mask(rng, n, p, miss_frac):
    """Bernoulli mask with every row guaranteed at least one observation."""
    mask = rng.random((n, p)) >= miss_frac
    dead = np.flatnonzero(~mask.any(axis=1))
    if dead.size:
        mask[dead, rng.integers(0, p, size=dead.size)] = True
    return mask


def sample_dataset(rng, model, n, miss_frac=0.0):
    """Draw n cases from the model and mask cells MCAR at miss_frac."""
    f = rng.standard_normal((n, model.m))
    x = model.mu + f @ model.loadings.T + rng.standard_normal((n, model.p)) * np.sqrt(model.psi)
    mask = random_mask(rng, n, model.p, miss_frac)
    return ObservedDataset(values=np.where(mask, x, 0.0), mask=mask)


def random_problem(seed, n, p, m, miss_frac=0.0):
    rng = np.random.default_rng(seed)
    model = random_model(rng, p, m)
    return model, sample_dataset(rng, model, n, miss_frac)


@pytest.fixture
def rng():
    return np.random.default_rng(20260816)
