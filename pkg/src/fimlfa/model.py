"""Core model and data containers for factor analysis with missing data.

The model is the classic linear factor model

    x = mu + Lambda f + e,   f ~ N(0, I_m),   e ~ N(0, Psi),

with Psi diagonal, so the implied covariance of x is Lambda Lambda' + Psi.
Datasets carry an explicit boolean mask of observed cells; every case must
have at least one observed variable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

# Unique variances are kept at or above this floor by all estimation updates.
PSI_FLOOR = 1e-6


class EstimationError(RuntimeError):
    """Numerical failure during estimation (singular systems, failed starts).

    Carries optional per-start diagnostics in ``diagnostics``.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


def _as_float_array(a, name, ndim):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class FactorModel:
    """Factor model parameters.

    Parameters
    ----------
    mu : ndarray of shape (p,)
        Mean vector.
    loadings : ndarray of shape (p, m)
        Factor loading matrix.
    psi : ndarray of shape (p,)
        Unique (residual) variances, strictly positive.
    """

    mu: np.ndarray
    loadings: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        mu = _as_float_array(self.mu, "mu", 1)
        loadings = _as_float_array(self.loadings, "loadings", 2)
        psi = _as_float_array(self.psi, "psi", 1)
        p = mu.shape[0]
        if loadings.shape[0] != p or psi.shape[0] != p:
            raise ValueError(
                f"inconsistent shapes: mu {mu.shape}, loadings {loadings.shape}, psi {psi.shape}"
            )
        if loadings.shape[1] < 1:
            raise ValueError("model needs at least one factor")
        if np.any(psi <= 0):
            bad = np.flatnonzero(psi <= 0)
            raise ValueError(f"psi must be strictly positive, offending indices {bad.tolist()}")
        for name, arr in (("mu", mu), ("loadings", loadings), ("psi", psi)):
            arr = np.ascontiguousarray(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def p(self) -> int:
        return self.mu.shape[0]

    @property
    def m(self) -> int:
        return self.loadings.shape[1]


def implied_covariance(model: FactorModel) -> np.ndarray:
    """Model-implied covariance Lambda Lambda' + Psi, symmetric (p, p)."""
    sigma = model.loadings @ model.loadings.T
    sigma[np.diag_indices_from(sigma)] += model.psi
    # enforce exact symmetry against rounding in the matmul
    return (sigma + sigma.T) / 2.0


def restrict_observed(model: FactorModel, case_mask: np.ndarray):
    """Restrict parameters to the observed coordinates of one case.

    Parameters
    ----------
    case_mask : boolean ndarray of shape (p,)
        True marks an observed variable.

    Returns
    -------
    (mu_sub, loadings_sub, psi_sub) for the observed rows, in original order.
    """
    case_mask = np.asarray(case_mask)
    if case_mask.dtype != np.bool_ or case_mask.shape != (model.p,):
        raise ValueError(f"case_mask must be boolean of shape ({model.p},)")
    if not case_mask.any():
        raise ValueError("empty observation: case_mask selects no variables")
    return model.mu[case_mask], model.loadings[case_mask], model.psi[case_mask]


class ObsCounts(NamedTuple):
    """Per-variable observation counts nobs[i] = #cases observing variable i."""

    counts: np.ndarray

    @property
    def never_observed(self) -> np.ndarray:
        return np.flatnonzero(self.counts == 0)


class PackedData(NamedTuple):
    """Pattern-grouped flat layout of an observed dataset.

    Cases are sorted so that cases sharing a missingness pattern are adjacent;
    per-pattern matrices are then computed once per group by the kernels.

    Fields
    ------
    n_cases, n_vars : int
    case_group : (N,) int64, group id of each sorted case (non-decreasing)
    group_ptr : (G+1,) int64, sorted-case index boundaries of each group
    pat_idx : int32, concatenated observed-variable indices of each group
    pat_ptr : (G+1,) int64, slices of pat_idx per group
    xobs : float64, observed values of sorted cases, each case contiguous
    xoff : (N+1,) int64, slices of xobs per sorted case
    case_order : (N,) int64, original index of each sorted case
    """

    n_cases: int
    n_vars: int
    case_group: np.ndarray
    group_ptr: np.ndarray
    pat_idx: np.ndarray
    pat_ptr: np.ndarray
    xobs: np.ndarray
    xoff: np.ndarray
    case_order: np.ndarray


@dataclass(frozen=True)
class ObservedDataset:
    """Data matrix plus observation mask.

    Parameters
    ----------
    values : ndarray of shape (N, p)
        Data; entries at masked-out (missing) cells are ignored and stored
        as 0.0 internally.
    mask : boolean ndarray of shape (N, p)
        True marks an observed cell. Every row must have at least one True.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask)
        if mask.dtype != np.bool_:
            raise ValueError("mask must be boolean")
        if values.ndim != 2 or values.shape != mask.shape:
            raise ValueError(f"values {values.shape} and mask {mask.shape} must be equal 2-d shapes")
        if values.shape[0] == 0:
            raise ValueError("dataset has no cases")
        if values.shape[1] == 0:
            raise ValueError("dataset has no variables")
        empty = np.flatnonzero(~mask.any(axis=1))
        if empty.size:
            raise ValueError(
                f"cases with no observed variables are not allowed, case indices {empty.tolist()}"
            )
        if not np.all(np.isfinite(values[mask])):
            raise ValueError("observed cells contain non-finite values")
        values = np.where(mask, values, 0.0)  # sentinel, never read
        mask = mask.copy(order="C")
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def n_cases(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]

    @cached_property
    def pattern_index(self) -> dict[bytes, np.ndarray]:
        """Map from packed mask-row bytes to the case indices sharing it."""
        return build_pattern_index(self)

    @cached_property
    def obs_counts(self) -> ObsCounts:
        return ObsCounts(counts=self.mask.sum(axis=0).astype(np.int64))

    @cached_property
    def packed(self) -> PackedData:
        """Pattern-grouped flat layout used by the computational kernels."""
        mask = self.mask
        n, p = mask.shape
        # keys in order of first occurrence for a deterministic group order
        _, first, inverse = np.unique(mask, axis=0, return_index=True, return_inverse=True)
        inverse = inverse.reshape(-1)
        order_of_group = np.argsort(np.argsort(first, kind="stable"), kind="stable")
        inverse = order_of_group[inverse]
        n_groups = first.size
        case_order = np.argsort(inverse, kind="stable").astype(np.int64)
        case_group = inverse[case_order].astype(np.int64)
        group_sizes = np.bincount(case_group, minlength=n_groups)
        group_ptr = np.zeros(n_groups + 1, dtype=np.int64)
        np.cumsum(group_sizes, out=group_ptr[1:])
        pat_lists = []
        pat_ptr = np.zeros(n_groups + 1, dtype=np.int64)
        for g in range(n_groups):
            row = mask[case_order[group_ptr[g]]]
            idx = np.flatnonzero(row).astype(np.int32)
            pat_lists.append(idx)
            pat_ptr[g + 1] = pat_ptr[g] + idx.size
        pat_idx = (
            np.concatenate(pat_lists) if pat_lists else np.zeros(0, dtype=np.int32)
        )
        sizes_per_case = pat_ptr[case_group + 1] - pat_ptr[case_group]
        xoff = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(sizes_per_case, out=xoff[1:])
        # row-major flatten of the sorted rows keeps each case contiguous,
        # columns ascending, matching pat_idx order
        xobs = self.values[case_order][mask[case_order]]
        for arr in (case_group, group_ptr, pat_idx, pat_ptr, xobs, xoff, case_order):
            arr.setflags(write=False)
        return PackedData(
            n_cases=n,
            n_vars=p,
            case_group=case_group,
            group_ptr=group_ptr,
            pat_idx=pat_idx,
            pat_ptr=pat_ptr,
            xobs=xobs,
            xoff=xoff,
            case_order=case_order,
        )


def build_pattern_index(dataset: ObservedDataset) -> dict[bytes, np.ndarray]:
    """Group case indices by distinct missingness pattern.

    Returns
    -------
    dict mapping ``mask_row.tobytes()`` to a sorted int64 array of the case
    indices sharing that pattern. The arrays partition ``range(N)``.
    """
    mask = dataset.mask
    index: dict[bytes, list[int]] = {}
    for i, row in enumerate(mask):
        index.setdefault(row.tobytes(), []).append(i)
    return {k: np.asarray(v, dtype=np.int64) for k, v in index.items()}


@dataclass(frozen=True)
class FitConfig:
    """Options shared by the iterative estimators.

    Convergence is declared when the relative log-likelihood change
    ``|l_t - l_{t-1}| / (|l_{t-1}| + 1)`` drops below ``tol``.
    """

    max_iter: int = 1000
    tol: float = 1e-8
    n_starts: int = 1
    seed: int = 0
    algorithm: str = "modified-em"
    restrict: bool = False

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if self.algorithm not in ("modified-em", "ordinary-em", "quasi-newton"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")


@dataclass(frozen=True)
class StartRecord:
    """Outcome of a single optimization start."""

    index: int
    loglik: float
    iterations: int
    converged: bool
    wall_time: float
    error: str | None = None


@dataclass(frozen=True)
class FitResult:
    """Converged estimate and bookkeeping from one fit.

    ``loglik_trace`` holds the initial log-likelihood followed by one entry
    per iteration of the winning start, so ``iterations == len(trace) - 1``.
    """

    model: FactorModel
    loglik: float
    iterations: int
    converged: bool
    wall_time: float
    loglik_trace: np.ndarray
    algorithm: str = ""
    starts: tuple[StartRecord, ...] = field(default_factory=tuple)


def canonicalize(loadings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotate loadings to the echelon identification form.

    Returns (rotated, transform) where ``rotated = loadings @ transform`` has
    exact zeros above the diagonal of its leading m rows and non-negative
    diagonal entries there. The transform is orthogonal, so the implied
    covariance and hence the likelihood are unchanged.
    """
    loadings = np.asarray(loadings, dtype=np.float64)
    p, m = loadings.shape
    if p < m:
        raise ValueError("need at least m rows to apply the echelon restriction")
    q, _ = np.linalg.qr(loadings[:m, :].T)
    rotated = loadings @ q
    signs = np.where(np.diag(rotated[:m, :]) < 0, -1.0, 1.0)
    rotated = rotated * signs
    transform = q * signs
    for i in range(m):
        rotated[i, i + 1 :] = 0.0  # exact zeros by construction, clear rounding dust
    return rotated, transform


def apply_restriction(model: FactorModel) -> FactorModel:
    """Return the equivalent model in echelon form (likelihood unchanged)."""
    rotated, _ = canonicalize(model.loadings)
    return FactorModel(mu=model.mu, loadings=rotated, psi=model.psi)
