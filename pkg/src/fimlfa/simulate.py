"""Simulation designs, missingness mechanisms, and experiment drivers.

The default design has p = 90 variables on m = 3 factors: loadings cycle
0.8 times the identity blocks, unique variances 0.36, and the first
``n_common`` variables are observed for every case (common measures).
Missingness is either MCAR (exactly q of the non-common variables per case)
or NMAR through a logistic selection on the case's own factor scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from .em import fit_em
from .model import (
    PSI_FLOOR,
    EstimationError,
    FactorModel,
    FitConfig,
    FitResult,
    ObservedDataset,
)
from .quasi_newton import fit_quasi_newton


def default_loadings(p: int, m: int, scale: float = 0.8) -> np.ndarray:
    """Block loading template: variable i loads ``scale`` on factor i mod m."""
    lam = np.zeros((p, m))
    lam[np.arange(p), np.arange(p) % m] = scale
    return lam


@dataclass(frozen=True)
class SimDesign:
    """One simulation cell.

    ``loadings`` defaults to the block template; ``psi`` defaults to the
    unit-variance rule 1 - diag(Lambda Lambda'), which must stay positive.
    ``q`` is the number of missing values per case among the non-common
    variables; the first ``n_common`` variables are always observed.
    """

    n_cases: int
    p: int = 90
    m: int = 3
    n_common: int = 6
    q: int = 0
    mechanism: str = "mcar"
    loadings: np.ndarray | None = None
    psi: np.ndarray | None = None
    nmar_slope: float = 1.0

    def __post_init__(self):
        if self.n_cases < 1:
            raise ValueError("n_cases must be >= 1")
        if self.p < 1 or self.m < 1 or self.m > self.p:
            raise ValueError(f"need 1 <= m <= p, got p={self.p}, m={self.m}")
        if not 0 <= self.n_common <= self.p:
            raise ValueError("n_common must lie in [0, p]")
        if not 0 <= self.q <= self.p - self.n_common:
            raise ValueError(
                f"q must lie in [0, p - n_common] = [0, {self.p - self.n_common}], got {self.q}"
            )
        if self.mechanism not in ("mcar", "nmar"):
            raise ValueError(f"mechanism must be 'mcar' or 'nmar', got {self.mechanism!r}")
        if self.loadings is not None:
            arr = np.asarray(self.loadings, dtype=np.float64)
            if arr.shape != (self.p, self.m):
                raise ValueError(f"loadings template must have shape ({self.p}, {self.m})")
            object.__setattr__(self, "loadings", arr)
        if self.psi is not None:
            arr = np.asarray(self.psi, dtype=np.float64)
            if arr.shape != (self.p,) or np.any(arr < 0):
                raise ValueError("psi template must be non-negative of shape (p,)")
            object.__setattr__(self, "psi", arr)

    def template(self):
        """(loadings, psi) with defaults filled in; psi from the
        unit-variance rule when not given explicitly."""
        lam = self.loadings if self.loadings is not None else default_loadings(self.p, self.m)
        if self.psi is not None:
            psi = self.psi
        else:
            psi = 1.0 - (lam**2).sum(axis=1)
            if np.any(psi <= 0):
                bad = np.flatnonzero(psi <= 0)
                raise ValueError(
                    f"unit-variance psi rule gives non-positive values at indices {bad.tolist()}"
                )
        return lam, psi


def true_model(design: SimDesign) -> FactorModel:
    lam, psi = design.template()
    return FactorModel(mu=np.zeros(design.p), loadings=lam, psi=np.maximum(psi, PSI_FLOOR))


def gen_complete_data(design: SimDesign, seed) -> tuple[ObservedDataset, FactorModel, np.ndarray]:
    """Draw a complete dataset from the design.

    Returns (dataset with everything observed, the generating model, and the
    factor draws, which the NMAR mechanism reuses). Noise uses the raw psi
    template, so a zero-psi design yields exactly noise-free data even though
    the returned model floors psi to stay valid.
    """
    lam, psi = design.template()
    rng = np.random.default_rng(seed)
    factors = rng.standard_normal((design.n_cases, design.m))
    noise = rng.standard_normal((design.n_cases, design.p)) * np.sqrt(psi)
    values = factors @ lam.T + noise
    mask = np.ones((design.n_cases, design.p), dtype=bool)
    return ObservedDataset(values=values, mask=mask), true_model(design), factors


def apply_mcar(dataset: ObservedDataset, design: SimDesign, seed) -> ObservedDataset:
    """Mask exactly q uniformly chosen non-common variables per case."""
    if dataset.n_vars != design.p or dataset.n_cases != design.n_cases:
        raise ValueError("dataset does not match the design dimensions")
    if design.q == 0:
        return dataset
    rng = np.random.default_rng(seed)
    n, nc, q = design.n_cases, design.n_common, design.q
    width = design.p - nc
    draws = rng.random((n, width))
    # the q smallest uniforms per row form a uniform q-subset
    mis = np.argpartition(draws, q - 1, axis=1)[:, :q]
    mask = dataset.mask.copy()
    rows = np.repeat(np.arange(n), q)
    mask[rows, nc + mis.reshape(-1)] = False
    return ObservedDataset(values=dataset.values, mask=mask)


class LogisticSelection(NamedTuple):
    """Selection model: P(x_ni missing) = expit(intercept + slope * lam_i' f_n),
    so with a positive slope the cases with large factor values lose their
    non-common responses, which is what makes the mechanism non-ignorable."""

    intercept: float
    slope: float


def calibrate_nmar_alpha(
    design: SimDesign,
    model: FactorModel,
    target_rate: float,
    factor_sample: np.ndarray,
    slope: float | None = None,
) -> LogisticSelection:
    """Find the intercept making the mean missing probability of the
    non-common variables equal ``target_rate`` under the selection model.

    The mean is a Monte Carlo average over ``factor_sample``; it is strictly
    increasing in the intercept, so bisection always converges. A zero slope
    has the exact solution logit(target).
    """
    if not 0.0 < target_rate < 1.0:
        raise ValueError(
            f"unattainable target rate {target_rate}: must lie strictly in (0, 1)"
        )
    slope = design.nmar_slope if slope is None else slope
    if slope == 0.0:
        return LogisticSelection(intercept=float(np.log(target_rate / (1.0 - target_rate))), slope=0.0)
    factor_sample = np.asarray(factor_sample, dtype=np.float64)
    if factor_sample.ndim != 2 or factor_sample.shape[1] != design.m or factor_sample.shape[0] == 0:
        raise ValueError("factor_sample must be a non-empty (S, m) array")
    lam_nc = model.loadings[design.n_common :]
    if lam_nc.shape[0] == 0:
        raise ValueError("design has no non-common variables to calibrate")
    eta = slope * (factor_sample @ lam_nc.T)  # S x (p - n_common)

    def mean_rate(alpha):
        return float(np.mean(expit(alpha + eta)))

    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mean_rate(mid) < target_rate:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    return LogisticSelection(intercept=0.5 * (lo + hi), slope=slope)


def apply_nmar(
    dataset: ObservedDataset,
    model: FactorModel,
    factors: np.ndarray,
    selection: LogisticSelection,
    design: SimDesign,
    seed,
    max_redraws: int = 100,
) -> ObservedDataset:
    """Mask non-common cells by the factor-dependent logistic selection.

    Uses the same factor draws that generated the data, which is what makes
    the mechanism non-ignorable. Cases ending up with nothing observed (only
    possible when n_common = 0) are redrawn a bounded number of times.
    """
    factors = np.asarray(factors, dtype=np.float64)
    if factors.shape != (design.n_cases, design.m):
        raise ValueError("factors must match the design shape (N, m)")
    rng = np.random.default_rng(seed)
    nc = design.n_common
    lam_nc = model.loadings[nc:]
    p_mis = expit(selection.intercept + selection.slope * (factors @ lam_nc.T))
    keep = rng.random(p_mis.shape) >= p_mis
    if nc == 0:
        empty = np.flatnonzero(~keep.any(axis=1))
        tries = 0
        while empty.size:
            tries += 1
            if tries > max_redraws:
                raise EstimationError(
                    f"{empty.size} cases still have no observed variables "
                    f"after {max_redraws} redraws"
                )
            keep[empty] = rng.random((empty.size, keep.shape[1])) >= p_mis[empty]
            empty = np.flatnonzero(~keep.any(axis=1))
    mask = np.ones((design.n_cases, design.p), dtype=bool)
    mask[:, nc:] = keep
    return ObservedDataset(values=dataset.values, mask=mask)


@dataclass(frozen=True)
class MetricReport:
    """Aggregate loading-recovery metrics over replications.

    With E_s the estimated and L the true loading matrix, over the rows past
    the skipped block and all m columns with r free entries total:

        sqrt_mse  = sqrt( sum_s ||E_s - L||^2 / (S r) )
        sqrt_bias = sqrt( ||mean_s E_s - L||^2 / r )
    """

    sqrt_mse: float
    sqrt_bias: float
    r: int
    n_replications: int


def sqrt_metrics(estimates, truth, skip_rows: int = 6) -> MetricReport:
    truth = np.asarray(truth, dtype=np.float64)
    est = np.asarray(estimates, dtype=np.float64)
    if est.ndim != 3 or est.shape[1:] != truth.shape:
        raise ValueError(
            f"estimates must be (S, p, m) matching truth {truth.shape}, got {est.shape}"
        )
    p, m = truth.shape
    if not 0 <= skip_rows < p:
        raise ValueError("skip_rows must lie in [0, p)")
    s = est.shape[0]
    if s == 0:
        raise ValueError("need at least one replication")
    r = (p - skip_rows) * m - m * (m - 1) // 2
    diff = est[:, skip_rows:, :] - truth[skip_rows:, :]
    sqrt_mse = math.sqrt(float(np.sum(diff**2)) / (s * r))
    mean_diff = diff.mean(axis=0)
    sqrt_bias = math.sqrt(float(np.sum(mean_diff**2)) / r)
    return MetricReport(sqrt_mse=sqrt_mse, sqrt_bias=sqrt_bias, r=r, n_replications=s)


def align_procrustes(estimate: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Rotate ``estimate`` by the orthogonal Procrustes solution onto truth.

    Needed only for unrestricted fits; echelon-restricted estimates are
    already aligned with an echelon truth.
    """
    estimate = np.asarray(estimate, dtype=np.float64)
    u, _, vt = np.linalg.svd(estimate.T @ truth)
    return estimate @ (u @ vt)


@dataclass(frozen=True)
class AccuracyCell:
    """One accuracy-experiment cell: a design plus whether the common block
    is kept for fitting (False drops those variables before estimation)."""

    design: SimDesign
    use_common: bool = True


@dataclass(frozen=True)
class CellResult:
    cell: AccuracyCell
    metrics: MetricReport
    n_failures: int


def _mask_dataset(design, dataset, model, factors, mask_seed, selection):
    if design.q == 0:
        return dataset
    if design.mechanism == "mcar":
        return apply_mcar(dataset, design, mask_seed)
    return apply_nmar(dataset, model, factors, selection, design, mask_seed)


def _drop_common(dataset: ObservedDataset, n_common: int) -> ObservedDataset:
    return ObservedDataset(
        values=dataset.values[:, n_common:], mask=dataset.mask[:, n_common:]
    )


def _fit_estimator(algorithm: str, dataset, m, config, init=None) -> FitResult:
    if algorithm == "modified-em":
        return fit_em(dataset, m, config, variant="modified", init=init)
    if algorithm == "ordinary-em":
        return fit_em(dataset, m, config, variant="ordinary", init=init)
    if algorithm == "quasi-newton":
        return fit_quasi_newton(dataset, m, config, init=init)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def run_accuracy_experiment(
    cells: Sequence[AccuracyCell],
    replications: int = 100,
    seed: int = 0,
    algorithm: str = "modified-em",
    tol: float = 1e-8,
    max_iter: int = 10000,
    failure_cap: float = 0.05,
    nmar_target: float | None = None,
) -> list[CellResult]:
    """Run replicated fits per cell and aggregate loading-recovery metrics.

    Per-replication seeds derive from (seed, cell index, replication index)
    by seed-sequence spawning, so any cell reproduces independently of the
    rest of the grid. Fit failures are recorded and skipped; a cell whose
    failure rate exceeds ``failure_cap`` raises.

    The echelon restriction is always on, which aligns estimates with the
    echelon-form truth without any Procrustes step. ``nmar_target`` is the
    calibrated missing rate among non-common variables; it defaults to
    q/(p - n_common), the MCAR missing-data volume at the same q.
    """
    if not cells:
        raise ValueError("empty design grid")
    if replications < 1:
        raise ValueError("replications must be >= 1")
    results = []
    for ci, cell in enumerate(cells):
        design = cell.design
        model = true_model(design)
        truth = model.loadings if cell.use_common else model.loadings[design.n_common :]
        skip = design.n_common if cell.use_common else 0
        selection = None
        if design.mechanism == "nmar" and design.q > 0:
            # target the MCAR missing-data volume: q missing per case among
            # the p - n_common candidates
            target = nmar_target
            if target is None:
                target = design.q / (design.p - design.n_common)
            cal_rng = np.random.default_rng(np.random.SeedSequence([seed, ci, 1 << 20]))
            factor_sample = cal_rng.standard_normal((10000, design.m))
            selection = calibrate_nmar_alpha(design, model, target, factor_sample)
        estimates = []
        failures = 0
        max_failures = int(failure_cap * replications)
        for rep in range(replications):
            data_seed, mask_seed, fit_seed = np.random.SeedSequence(
                [seed, ci, rep]
            ).spawn(3)
            dataset, _, factors = gen_complete_data(design, data_seed)
            masked = _mask_dataset(design, dataset, model, factors, mask_seed, selection)
            if not cell.use_common:
                masked = _drop_common(masked, design.n_common)
            config = FitConfig(
                max_iter=max_iter,
                tol=tol,
                n_starts=1,
                seed=int(fit_seed.generate_state(1)[0]),
                restrict=True,
            )
            try:
                fit = _fit_estimator(algorithm, masked, design.m, config)
            except EstimationError:
                failures += 1
                if failures > max_failures:
                    raise EstimationError(
                        f"cell {ci}: {failures} fit failures exceed the "
                        f"{failure_cap:.0%} cap over {replications} replications"
                    )
                continue
            estimates.append(fit.model.loadings)
        metrics = sqrt_metrics(np.asarray(estimates), truth, skip_rows=skip)
        results.append(CellResult(cell=cell, metrics=metrics, n_failures=failures))
    return results


def _split_list(value: str) -> list:
    return [t.strip() for t in str(value).split(",") if t.strip() != ""]


def _parse_bool(value: str) -> bool:
    v = str(value).strip().lower()
    if v in ("true", "yes", "1"):
        return True
    if v in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {value!r}")


def accuracy_plan_from_config(cfg: dict) -> tuple[list[AccuracyCell], dict]:
    """Build the cell grid and driver options for an accuracy experiment.

    The grid is the cross product of the ``n``, ``q``, ``mechanism`` and
    ``common`` lists; remaining keys set the shared design and fit options.
    Returns (cells, keyword arguments for run_accuracy_experiment).
    """
    known = {
        "mode", "n", "q", "mechanism", "common", "replications", "seed",
        "p", "m", "n_common", "algorithm", "tol", "max_iter", "nmar_slope",
        "nmar_target", "failure_cap",
    }
    unknown = set(cfg) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "n" not in cfg:
        raise ValueError("config must set n (sample size list)")
    n_list = [int(v) for v in _split_list(cfg["n"])]
    q_list = [int(v) for v in _split_list(cfg.get("q", "0"))]
    mech_list = _split_list(cfg.get("mechanism", "mcar"))
    common_list = [_parse_bool(v) for v in _split_list(cfg.get("common", "true"))]
    if not n_list or not q_list or not mech_list or not common_list:
        raise ValueError("empty design grid")
    p = int(cfg.get("p", 90))
    m = int(cfg.get("m", 3))
    n_common = int(cfg.get("n_common", 6))
    nmar_slope = float(cfg.get("nmar_slope", 1.0))
    cells = []
    for n in n_list:
        for q in q_list:
            for mech in mech_list:
                for common in common_list:
                    design = SimDesign(
                        n_cases=n, p=p, m=m, n_common=n_common, q=q,
                        mechanism=mech, nmar_slope=nmar_slope,
                    )
                    cells.append(AccuracyCell(design=design, use_common=common))
    kwargs = {
        "replications": int(cfg.get("replications", 100)),
        "seed": int(cfg.get("seed", 0)),
        "algorithm": cfg.get("algorithm", "modified-em"),
        "tol": float(cfg.get("tol", 1e-8)),
        "max_iter": int(cfg.get("max_iter", 10000)),
        "failure_cap": float(cfg.get("failure_cap", 0.05)),
    }
    if cfg.get("nmar_target", "") != "":
        kwargs["nmar_target"] = float(cfg["nmar_target"])
    return cells, kwargs


def timing_plan_from_config(cfg: dict) -> dict:
    """Keyword arguments for run_timing_experiment from a parsed config."""
    known = {
        "mode", "n", "q", "algorithms", "runs", "seed", "tol", "max_iter",
        "p", "m", "n_common",
    }
    unknown = set(cfg) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "n" not in cfg:
        raise ValueError("config must set n (sample size)")
    design_kwargs = {
        "p": int(cfg.get("p", 90)),
        "m": int(cfg.get("m", 3)),
        "n_common": int(cfg.get("n_common", 6)),
    }
    q_values = [int(v) for v in _split_list(cfg.get("q", "0"))]
    algorithms = _split_list(
        cfg.get("algorithms", "modified-em, ordinary-em, quasi-newton")
    )
    if not q_values or not algorithms:
        raise ValueError("empty design grid")
    return {
        "n_cases": int(cfg["n"]),
        "q_values": q_values,
        "algorithms": algorithms,
        "runs": int(cfg.get("runs", 10)),
        "seed": int(cfg.get("seed", 0)),
        "tol": float(cfg.get("tol", 1e-6)),
        "max_iter": int(cfg.get("max_iter", 100000)),
        "design_kwargs": design_kwargs,
    }


@dataclass(frozen=True)
class TimingRow:
    q: int
    algorithm: str
    mean_time: float
    mean_iterations: float
    speedup_vs_baseline: float
    runs: int


def run_timing_experiment(
    n_cases: int,
    q_values: Sequence[int],
    algorithms: Sequence[str],
    runs: int = 10,
    seed: int = 0,
    tol: float = 1e-6,
    max_iter: int = 100000,
    design_kwargs: dict | None = None,
) -> list[TimingRow]:
    """Time each algorithm across the missingness grid.

    For a given (q, run) every algorithm sees the same data, the same mask
    and the same starting values, so the comparison isolates the algorithms.
    The speedup baseline is the quasi-Newton method on complete data (q = 0),
    timed with the same seeds whether or not it is in ``algorithms``.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    for alg in algorithms:
        if alg not in ("modified-em", "ordinary-em", "quasi-newton"):
            raise ValueError(f"unknown algorithm {alg!r}")
    kwargs = dict(design_kwargs or {})

    def _cell(q):
        return SimDesign(n_cases=n_cases, q=q, mechanism="mcar", **kwargs)

    def _run_fits(design, algorithm):
        times, iters = [], []
        for rep in range(runs):
            data_seed, mask_seed, fit_seed = np.random.SeedSequence(
                [seed, design.q, rep]
            ).spawn(3)
            dataset, _, _ = gen_complete_data(design, data_seed)
            masked = apply_mcar(dataset, design, mask_seed)
            config = FitConfig(
                max_iter=max_iter,
                tol=tol,
                n_starts=1,
                seed=int(fit_seed.generate_state(1)[0]),
                restrict=True,
            )
            fit = _fit_estimator(algorithm, masked, design.m, config)
            times.append(fit.wall_time)
            iters.append(fit.iterations)
        return float(np.mean(times)), float(np.mean(iters))

    baseline_time, _ = _run_fits(_cell(0), "quasi-newton")
    rows = []
    for q in q_values:
        design = _cell(q)
        for alg in algorithms:
            mean_time, mean_iters = _run_fits(design, alg)
            rows.append(
                TimingRow(
                    q=q,
                    algorithm=alg,
                    mean_time=mean_time,
                    mean_iterations=mean_iters,
                    speedup_vs_baseline=baseline_time / mean_time,
                    runs=runs,
                )
            )
    return rows
