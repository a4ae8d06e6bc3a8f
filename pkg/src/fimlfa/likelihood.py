"""Observed-data (full-information) Gaussian log-likelihood and its gradients.

The log-likelihood sums, over cases, the density of the observed coordinates
under the implied covariance restricted to those coordinates:

    l = -1/2 sum_n [ c_n log 2pi + log det S_[n] + (x - mu)' S_[n]^-1 (x - mu) ]

with c_n the number of observed variables of case n. Per-case terms are
evaluated through m-dimensional factorizations only (see PrecisionBlocks and
the kernel module); cost is O(p_obs m^2 + m^3) per case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .model import EstimationError, FactorModel, ObservedDataset


@dataclass(frozen=True)
class PrecisionBlocks:
    """Reusable factorization pieces for Woodbury-style likelihood algebra.

    Fields
    ------
    psi_inv : (p,) elementwise 1 / psi
    psi_inv_loadings : (p, m) Psi^-1 Lambda
    factor_precision : (m, m) posterior factor precision I + Lambda' Psi^-1 Lambda
        for a fully observed case
    factor_precision_chol : (m, m) lower Cholesky factor of factor_precision
    """

    psi_inv: np.ndarray
    psi_inv_loadings: np.ndarray
    factor_precision: np.ndarray
    factor_precision_chol: np.ndarray


def precision_blocks(model: FactorModel) -> PrecisionBlocks:
    """Build the shared factorization pieces for ``model``.

    Raises
    ------
    EstimationError
        If the m x m factor precision cannot be Cholesky-factorized.
    """
    psi_inv = 1.0 / model.psi
    pil = model.loadings * psi_inv[:, None]
    fp = model.loadings.T @ pil
    fp[np.diag_indices_from(fp)] += 1.0
    fp = (fp + fp.T) / 2.0
    try:
        chol = np.linalg.cholesky(fp)
    except np.linalg.LinAlgError as exc:
        raise EstimationError(f"factor precision factorization failed: {exc}") from exc
    return PrecisionBlocks(
        psi_inv=psi_inv,
        psi_inv_loadings=pil,
        factor_precision=fp,
        factor_precision_chol=chol,
    )


def _check_shapes(model: FactorModel, dataset: ObservedDataset):
    if dataset.n_vars != model.p:
        raise ValueError(
            f"dataset has {dataset.n_vars} variables but model has {model.p}"
        )


def fiml_loglik(model: FactorModel, dataset: ObservedDataset) -> float:
    """Observed-data log-likelihood of ``model`` on ``dataset``."""
    _check_shapes(model, dataset)
    return _kernels.loglik(dataset.packed, model.mu, model.loadings, model.psi)


def fiml_gradients(model: FactorModel, dataset: ObservedDataset):
    """Analytic gradients of the observed-data log-likelihood.

    Returns
    -------
    (loglik, g_mu, g_loadings, g_psi)
        Gradients with respect to mu (p,), the loading matrix (p, m) and the
        unique variances (p,). Entries of the loading gradient that an
        identification restriction would fix at zero are still reported;
        masking them is the optimizer's job.
    """
    _check_shapes(model, dataset)
    return _kernels.loglik_grad(dataset.packed, model.mu, model.loadings, model.psi)
