"""BFGS baseline for direct maximization of the observed-data likelihood.

Parameters are packed into one flat vector (mu, free loading entries in
row-major order, log unique variances). The echelon identification
restriction is always applied here: without it the likelihood is constant
along rotations of the loading matrix and the Hessian is singular in those
directions. Loadings fixed at zero by the restriction simply never enter the
packed vector, so every iterate satisfies the restriction exactly.

The search is plain BFGS on the negative log-likelihood with Armijo
backtracking (initial step 1, contraction 1/2, slope parameter 1e-4) and a
full dense inverse-Hessian approximation started at the identity.

Three safeguards keep the search out of regions where the likelihood cannot
be evaluated in floating point: trial displacements are capped in infinity
norm, iterates with log unique variances outside a wide box are treated as
infeasible, and a relative-change stop is never allowed to certify a point
whose gradient is still blatantly large (an unbounded Heywood ridge stalls
by rounding; it has to surface as non-convergence, not success).
"""

from __future__ import annotations

import time

import numpy as np

from .likelihood import fiml_gradients, fiml_loglik
from .model import (
    EstimationError,
    FactorModel,
    FitConfig,
    FitResult,
    ObservedDataset,
    StartRecord,
    apply_restriction,
)
from .em import initial_model

ARMIJO_SLOPE = 1e-4
BACKTRACK = 0.5
MAX_BACKTRACKS = 60
MAX_STEP = 10.0  # inf-norm cap on the trial displacement per iteration
LOG_PSI_BOUND = 138.0  # |log psi| beyond this (psi outside ~1e+-60) is infeasible


def free_loading_mask(p: int, m: int, restrict: bool = True) -> np.ndarray:
    """Boolean (p, m) mask of loading entries that are free parameters."""
    mask = np.ones((p, m), dtype=bool)
    if restrict:
        for i in range(min(m, p)):
            mask[i, i + 1 :] = False
    return mask


def n_packed(p: int, m: int, restrict: bool = True) -> int:
    return 2 * p + int(free_loading_mask(p, m, restrict).sum())


def pack(model: FactorModel, restrict: bool = True) -> np.ndarray:
    """Flatten (mu, free loadings, log psi) into one parameter vector."""
    free = free_loading_mask(model.p, model.m, restrict)
    if restrict and np.any(model.loadings[~free] != 0.0):
        raise ValueError("model violates the echelon restriction; restricted entries must be 0")
    return np.concatenate([model.mu, model.loadings[free], np.log(model.psi)])


def unpack(params: np.ndarray, p: int, m: int, restrict: bool = True) -> FactorModel:
    """Inverse of ``pack``; restricted loading entries come back as exact zeros."""
    params = np.asarray(params, dtype=np.float64)
    free = free_loading_mask(p, m, restrict)
    n_free = int(free.sum())
    if params.shape != (2 * p + n_free,):
        raise ValueError(f"expected parameter vector of length {2 * p + n_free}, got {params.shape}")
    mu = params[:p]
    loadings = np.zeros((p, m))
    loadings[free] = params[p : p + n_free]
    # overflow to inf is fine: model validation rejects it and the line
    # search treats the point as infeasible
    with np.errstate(over="ignore"):
        psi = np.exp(params[p + n_free :])
    return FactorModel(mu=mu, loadings=loadings, psi=psi)


def pack_gradient(model: FactorModel, g_mu, g_loadings, g_psi, restrict: bool = True) -> np.ndarray:
    """Map parameter-space gradients into the packed space.

    The log-variance chain rule d l / d log psi = psi * (d l / d psi) is
    applied; gradients of restricted loading entries are dropped.
    """
    free = free_loading_mask(model.p, model.m, restrict)
    return np.concatenate([g_mu, np.asarray(g_loadings)[free], model.psi * np.asarray(g_psi)])


def _neg_loglik(params, dataset, p, m):
    # outside the log psi box, or once the covariance condition number breaks
    # double precision (kappa ~ max lambda^2 / min psi beyond ~1e14), the
    # computed value carries no correct digits and can come out as a huge
    # positive lie; the true value out there is a huge positive barrier, so
    # report such points as infeasible instead
    if np.max(np.abs(params[-p:])) > LOG_PSI_BOUND:
        return np.inf
    try:
        model = unpack(params, p, m)
        lam_sq = float(np.max(np.abs(model.loadings))) ** 2
        if float(model.psi.min()) < 1e-14 * (1.0 + lam_sq):
            return np.inf
        ll = fiml_loglik(model, dataset)
    except (ValueError, EstimationError, np.linalg.LinAlgError):
        return np.inf
    if not np.isfinite(ll):
        return np.inf
    return -ll


def _neg_loglik_grad(params, dataset, p, m):
    model = unpack(params, p, m)
    ll, gmu, glam, gpsi = fiml_gradients(model, dataset)
    return -ll, -pack_gradient(model, gmu, glam, gpsi)


def _bfgs_start(dataset, start_model, config):
    p, m = start_model.p, start_model.m
    n = dataset.n_cases
    x = pack(start_model)
    f, g = _neg_loglik_grad(x, dataset, p, m)
    if not np.isfinite(f):
        raise EstimationError("non-finite log-likelihood at the start")
    dim = x.size
    h = np.eye(dim)  # inverse Hessian approximation of the negative loglik
    trace = [-f]
    converged = False
    for _ in range(config.max_iter):
        if np.max(np.abs(g)) <= 1e-8 * (1.0 + abs(f)):
            converged = True
            break
        with np.errstate(over="ignore", invalid="ignore"):
            d = -(h @ g)
            slope = g @ d
        steepest = not np.isfinite(slope) or slope >= 0.0
        if steepest:  # safeguard: reset a stale or overflowed curvature model
            h = np.eye(dim)
            d = -g
        dmax = np.max(np.abs(d))
        if dmax > MAX_STEP:
            # cap the trial displacement: an overconfident quasi-Newton step
            # can otherwise jump straight into the infeasible psi region
            d = d * (MAX_STEP / dmax)
        slope = g @ d
        alpha = 1.0
        f_new = np.inf
        for _bt in range(MAX_BACKTRACKS):
            f_new = _neg_loglik(x + alpha * d, dataset, p, m)
            if f_new <= f + ARMIJO_SLOPE * alpha * slope:
                break
            alpha *= BACKTRACK
        else:
            # exhausted backtracking: at a stationary point this is just
            # rounding noise; with a poisoned curvature model a steepest
            # descent restart may recover; otherwise it is a real divergence
            if np.max(np.abs(g)) <= 1e-5 * max(1.0, n):
                converged = True
                break
            if not steepest:
                h = np.eye(dim)
                continue
            raise EstimationError(
                f"line search failed with gradient norm {np.max(np.abs(g)):.3e}"
            )
        x_new = x + alpha * d
        f_new, g_new = _neg_loglik_grad(x_new, dataset, p, m)
        trace.append(-f_new)
        s = x_new - x
        y = g_new - g
        sy = s @ y
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            hy = h @ y
            h -= rho * (np.outer(s, hy) + np.outer(hy, s))
            h += rho * (rho * (y @ hy) + 1.0) * np.outer(s, s)
        rel = abs(f_new - f) / (abs(f) + 1.0)
        x, f, g = x_new, f_new, g_new
        # the relative-change stop honors config.tol, but never certifies a
        # point with a blatantly large gradient: progress also stalls (by
        # rounding) while racing up an unbounded Heywood ridge, and that must
        # surface as non-convergence rather than a bogus boundary solution;
        # the ceiling is loose so a merely slow interior tail still counts
        if rel < config.tol and np.max(np.abs(g)) <= 1e-2 * max(1.0, n):
            converged = True
            break
    model = apply_restriction(unpack(x, p, m))
    return model, trace, converged


def fit_quasi_newton(
    dataset: ObservedDataset,
    n_factors: int,
    config: FitConfig = FitConfig(),
    init: FactorModel | None = None,
) -> FitResult:
    """Fit the factor model by BFGS under the echelon restriction.

    Start models follow the same scheme as the EM engine (identical seeds
    give identical starting values), rotated into echelon form. A start whose
    line search fails away from a stationary point counts as diverged; it is
    recorded and the remaining starts still run. If every start diverges an
    EstimationError with the per-start diagnostics is raised.
    """
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
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_starts)
    n_starts = 1 if init is not None else config.n_starts
    best: FitResult | None = None
    records: list[StartRecord] = []
    for s in range(n_starts):
        rng = np.random.default_rng(seeds[s])
        t0 = time.perf_counter()
        try:
            start_model = init if init is not None else initial_model(dataset, n_factors, rng)
            start_model = apply_restriction(start_model)
            model, trace, converged = _bfgs_start(dataset, start_model, config)
        except (EstimationError, np.linalg.LinAlgError, ValueError) as exc:
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
                algorithm="quasi-newton",
                starts=(),
            )
    if best is None:
        raise EstimationError(
            f"all {n_starts} quasi-Newton starts diverged", diagnostics=records
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
