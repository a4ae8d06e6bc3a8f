"""EM estimation for the factor model under missing data.

Two variants share the driver ``fit_em``:

* ``ordinary``: the classic formulation whose complete data are the full
  response vectors plus the factors. The E-step fills conditional moments of
  every missing coordinate, costing O(p^2) per case.
* ``modified``: the complete data are the observed coordinates plus the
  factors only. The E-step needs just the posterior factor moments of each
  case, costing O(p_obs m^2) per case, and the M-step solves one small
  (m + 1)-dimensional system per variable over the cases observing it.

Both M-steps maximize their expected complete-data log-likelihood exactly
(means and loadings jointly, then variances), so each iteration cannot
decrease the observed-data log-likelihood.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import _kernels
from .model import (
    PSI_FLOOR,
    EstimationError,
    FactorModel,
    FitConfig,
    FitResult,
    ObservedDataset,
    StartRecord,
    apply_restriction,
    restrict_observed,
)


@dataclass(frozen=True)
class FactorMoments:
    """Posterior factor moments of one case: E[f | x_obs] and E[f f' | x_obs]."""

    mean: np.ndarray
    second_moment: np.ndarray

    @property
    def covariance(self) -> np.ndarray:
        return self.second_moment - np.outer(self.mean, self.mean)


@dataclass(frozen=True)
class FullMoments:
    """Conditional moments of (x, f) given the observed part of one case.

    ``x_hat`` carries observed values where observed and conditional means
    where missing; the v_* blocks are conditional covariances (zero in rows
    and columns of observed coordinates).
    """

    x_hat: np.ndarray
    f_hat: np.ndarray
    v_xx: np.ndarray
    v_xf: np.ndarray
    v_ff: np.ndarray


@dataclass(frozen=True)
class SufficientStats:
    """Accumulated expected complete-data moments.

    z = (1, f) is the regression vector of the complete-data model
    x = (mu, Lambda) z + e, so ``sum_zx`` is (m+1, p) and ``sum_zz`` is
    (m+1, m+1); ``sum_xx`` is the expected (p, p) second moment of x.
    """

    sum_xx: np.ndarray
    sum_zx: np.ndarray
    sum_zz: np.ndarray
    n_cases: int


def conditional_factor_moments(model: FactorModel, x: np.ndarray, case_mask: np.ndarray) -> FactorMoments:
    """Posterior mean and second moment of the factors for a single case.

    A case with no observed variables gets the prior (zero mean, identity
    second moment).
    """
    x = np.asarray(x, dtype=np.float64)
    case_mask = np.asarray(case_mask)
    if x.shape != (model.p,) or case_mask.shape != (model.p,):
        raise ValueError("x and case_mask must have shape (p,)")
    m = model.m
    if not case_mask.any():
        return FactorMoments(mean=np.zeros(m), second_moment=np.eye(m))
    mu_o, lam_o, psi_o = restrict_observed(model, case_mask)
    b = lam_o / psi_o[:, None]
    a = lam_o.T @ b
    a[np.diag_indices_from(a)] += 1.0
    v = np.linalg.inv((a + a.T) / 2.0)
    fhat = v @ (b.T @ (x[case_mask] - mu_o))
    return FactorMoments(mean=fhat, second_moment=np.outer(fhat, fhat) + v)


def conditional_full_moments(model: FactorModel, x: np.ndarray, case_mask: np.ndarray) -> FullMoments:
    """Conditional moments of the full response vector and the factors.

    Missing coordinates get mean mu_mis + Lambda_mis f_hat and covariance
    Lambda_mis V Lambda_mis' + Psi_mis; the cross block with the factors is
    Lambda_mis V. Observed coordinates are reproduced exactly with zero
    conditional covariance.
    """
    fm = conditional_factor_moments(model, x, case_mask)
    case_mask = np.asarray(case_mask)
    p, m = model.p, model.m
    v = fm.covariance
    v = (v + v.T) / 2.0
    mis = ~case_mask
    x_hat = np.where(case_mask, x, 0.0)
    x_hat[mis] = model.mu[mis] + model.loadings[mis] @ fm.mean
    v_xx = np.zeros((p, p))
    v_xf = np.zeros((p, m))
    if mis.any():
        lam_m = model.loadings[mis]
        block = lam_m @ v @ lam_m.T
        block[np.diag_indices_from(block)] += model.psi[mis]
        v_xx[np.ix_(mis, mis)] = block
        v_xf[mis] = lam_m @ v
    return FullMoments(x_hat=x_hat, f_hat=fm.mean, v_xx=v_xx, v_xf=v_xf, v_ff=v)


def estep_modified(model: FactorModel, dataset: ObservedDataset) -> Iterator[FactorMoments]:
    """Stream per-case posterior factor moments in original case order."""
    fhat, smom = _factor_moment_arrays(model, dataset)
    for i in range(dataset.n_cases):
        yield FactorMoments(mean=fhat[i], second_moment=smom[i])


def _factor_moment_arrays(model: FactorModel, dataset: ObservedDataset):
    if dataset.n_vars != model.p:
        raise ValueError(f"dataset has {dataset.n_vars} variables but model has {model.p}")
    packed = dataset.packed
    fhat_s, vhat_s = _kernels.factor_moments(packed, model.mu, model.loadings, model.psi)
    smom_s = vhat_s + np.einsum("ni,nj->nij", fhat_s, fhat_s)
    inv = np.empty(dataset.n_cases, dtype=np.int64)
    inv[packed.case_order] = np.arange(dataset.n_cases)
    return fhat_s[inv], smom_s[inv]


def estep_ordinary(model: FactorModel, dataset: ObservedDataset) -> SufficientStats:
    """Expected complete-data sufficient statistics under the current model."""
    if dataset.n_vars != model.p:
        raise ValueError(f"dataset has {dataset.n_vars} variables but model has {model.p}")
    _, sxx, szx, szz = _kernels.ordinary_suffstats(
        dataset.packed, model.mu, model.loadings, model.psi
    )
    return SufficientStats(sum_xx=sxx, sum_zx=szx, sum_zz=szz, n_cases=dataset.n_cases)


def mstep_ordinary(stats: SufficientStats) -> FactorModel:
    """Maximize the expected complete-data log-likelihood given ``stats``.

    (mu, Lambda) solves the normal equations of the regression of x on
    z = (1, f); psi is the per-variable expected residual second moment.
    """
    szz = stats.sum_zz
    try:
        coef = np.linalg.solve(szz, stats.sum_zx).T  # p x (m+1), col 0 is mu
    except np.linalg.LinAlgError as exc:
        raise EstimationError(f"degenerate factor moments: {exc}") from exc
    resid = (
        np.diag(stats.sum_xx)
        - 2.0 * np.einsum("ij,ji->i", coef, stats.sum_zx)
        + np.einsum("ij,jk,ik->i", coef, szz, coef)
    )
    psi = np.maximum(resid / stats.n_cases, PSI_FLOOR)
    return FactorModel(mu=coef[:, 0], loadings=coef[:, 1:], psi=psi)


def mstep_modified(dataset: ObservedDataset, moments) -> FactorModel:
    """Per-variable M-step from posterior factor moments.

    Each variable i is regressed on z = (1, f) over the cases that observe
    it, using that case's expected factor moments; psi_i is the expected
    residual second moment over those cases.

    Parameters
    ----------
    moments : iterable of FactorMoments in original case order, or the pair
        of arrays (means (N, m), second_moments (N, m, m)).
    """
    if isinstance(moments, tuple):
        fhat, smom = moments
    else:
        tup = list(moments)
        fhat = np.asarray([t.mean for t in tup])
        smom = np.asarray([t.second_moment for t in tup])
    n, p = dataset.n_cases, dataset.n_vars
    if fhat.shape[0] != n:
        raise ValueError(f"expected {n} factor-moment entries, got {fhat.shape[0]}")
    m = fhat.shape[1]
    mask = dataset.mask
    maskf = mask.astype(np.float64)
    counts = mask.sum(axis=0)

    gram = np.zeros((p, m + 1, m + 1))
    gram[:, 0, 0] = counts
    sum_f = maskf.T @ fhat
    gram[:, 0, 1:] = sum_f
    gram[:, 1:, 0] = sum_f
    gram[:, 1:, 1:] = np.einsum("np,nij->pij", maskf, smom)

    xm = dataset.values * maskf
    resp = np.empty((p, m + 1))
    resp[:, 0] = xm.sum(axis=0)
    resp[:, 1:] = xm.T @ fhat
    sumsq = np.einsum("np,np->p", xm, xm)
    return _solve_modified_mstep(gram, resp, sumsq, counts)


def _solve_modified_mstep(gram, resp, sumsq, counts) -> FactorModel:
    p = gram.shape[0]
    try:
        # batched per-variable solve; row i of coef holds (mu_i, lambda_i)
        coef = np.linalg.solve(gram, resp[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        coef = None
    if coef is None or not np.all(np.isfinite(coef)):
        for i in range(p):
            try:
                np.linalg.solve(gram[i], resp[i])
            except np.linalg.LinAlgError as exc:
                raise EstimationError(
                    f"degenerate factor moments for variable {i}: {exc}"
                ) from exc
        raise EstimationError("degenerate factor moments")
    resid = sumsq - 2.0 * np.einsum("ij,ij->i", coef, resp) + np.einsum(
        "ij,ijk,ik->i", coef, gram, coef
    )
    with np.errstate(invalid="ignore", divide="ignore"):
        psi = np.maximum(resid / counts, PSI_FLOOR)
    return FactorModel(mu=coef[:, 0], loadings=coef[:, 1:], psi=psi)


def initial_model(dataset: ObservedDataset, n_factors: int, rng: np.random.Generator) -> FactorModel:
    """Default random start: observed means, U(-0.5, 0.5) loadings, half the
    observed variances as unique variances."""
    counts = dataset.obs_counts.counts
    never = np.flatnonzero(counts == 0)
    if never.size:
        raise EstimationError(
            f"variables never observed cannot be estimated: indices {never.tolist()}"
        )
    maskf = dataset.mask.astype(np.float64)
    xm = dataset.values * maskf
    mu = xm.sum(axis=0) / counts
    ex2 = np.einsum("np,np->p", xm, xm) / counts
    var = np.maximum(ex2 - mu**2, 0.0)
    psi = np.maximum(0.5 * var, PSI_FLOOR)
    loadings = rng.uniform(-0.5, 0.5, size=(dataset.n_vars, n_factors))
    return FactorModel(mu=mu, loadings=loadings, psi=psi)


def _relative_change(new, old):
    return abs(new - old) / (abs(old) + 1.0)


def _run_em_start(packed, n_cases, model, variant, config, sumsq, counts):
    """One EM start. The E-step kernels return the current model's
    log-likelihood as a byproduct, so each iteration costs one data pass."""
    trace = []
    converged = False
    prev = None
    for it in range(config.max_iter + 1):
        if variant == "modified":
            ll, gram, resp = _kernels.modified_suffstats(
                packed, model.mu, model.loadings, model.psi
            )
        else:
            ll, sxx, szx, szz = _kernels.ordinary_suffstats(
                packed, model.mu, model.loadings, model.psi
            )
        if not np.isfinite(ll):
            raise EstimationError("log-likelihood became non-finite")
        trace.append(ll)
        if prev is not None and _relative_change(ll, prev) < config.tol:
            converged = True
            break
        if it == config.max_iter:
            break
        if variant == "modified":
            model = _solve_modified_mstep(gram, resp, sumsq, counts)
        else:
            model = mstep_ordinary(
                SufficientStats(sum_xx=sxx, sum_zx=szx, sum_zz=szz, n_cases=n_cases)
            )
        if config.restrict:
            model = apply_restriction(model)
        prev = ll
    return model, trace, converged


def fit_em(
    dataset: ObservedDataset,
    n_factors: int,
    config: FitConfig = FitConfig(),
    variant: str = "modified",
    init: FactorModel | None = None,
) -> FitResult:
    """Fit the factor model by EM.

    Parameters
    ----------
    variant : "modified" (factors-only complete data) or "ordinary".
    init : optional starting model; when given, n_starts is ignored and a
        single start runs from it.

    Returns
    -------
    FitResult for the start with the best final log-likelihood. Starts that
    fail numerically are recorded; if every start fails an EstimationError
    carrying the per-start diagnostics is raised.
    """
    if variant not in ("modified", "ordinary"):
        raise ValueError(f"unknown EM variant {variant!r}")
    if n_factors < 1:
        raise ValueError("n_factors must be >= 1")
    if n_factors > dataset.n_vars:
        raise ValueError(
            f"n_factors {n_factors} exceeds number of variables {dataset.n_vars}"
        )
    counts = dataset.obs_counts.counts
    never = np.flatnonzero(counts == 0)
    if never.size:
        raise EstimationError(
            f"variables never observed cannot be estimated: indices {never.tolist()}"
        )
    packed = dataset.packed
    maskf = dataset.mask.astype(np.float64)
    xm = dataset.values * maskf
    sumsq = np.einsum("np,np->p", xm, xm)

    seeds = np.random.SeedSequence(config.seed).spawn(config.n_starts)
    n_starts = 1 if init is not None else config.n_starts
    best: FitResult | None = None
    records: list[StartRecord] = []
    for s in range(n_starts):
        rng = np.random.default_rng(seeds[s])
        t0 = time.perf_counter()
        try:
            model = init if init is not None else initial_model(dataset, n_factors, rng)
            if config.restrict:
                model = apply_restriction(model)
            model, trace, converged = _run_em_start(
                packed, dataset.n_cases, model, variant, config, sumsq, counts
            )
        except (EstimationError, np.linalg.LinAlgError) as exc:
            records.append(
                StartRecord(
                    index=s, loglik=np.nan, iterations=0, converged=False,
                    wall_time=time.perf_counter() - t0, error=str(exc),
                )
            )
            continue
        elapsed = time.perf_counter() - t0
        ll = trace[-1]
        records.append(
            StartRecord(
                index=s, loglik=ll, iterations=len(trace) - 1, converged=converged,
                wall_time=elapsed, error=None,
            )
        )
        if best is None or ll > best.loglik:
            best = FitResult(
                model=model,
                loglik=ll,
                iterations=len(trace) - 1,
                converged=converged,
                wall_time=elapsed,
                loglik_trace=np.asarray(trace),
                algorithm=f"{variant}-em",
                starts=(),
            )
    if best is None:
        raise EstimationError(
            f"all {n_starts} EM starts failed", diagnostics=records
        )
    return FitResult(
        model=best.model,
        loglik=best.loglik,
        iterations=best.iterations,
        converged=best.converged,
        wall_time=best.wall_time,
        loglik_trace=best.loglik_trace,
        algorithm=best.algorithm,
        starts=tuple(records),
    )
