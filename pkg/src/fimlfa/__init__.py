"""Factor analysis by full-information maximum likelihood for incomplete data.

Estimators: a factors-only EM variant whose per-iteration cost scales with
the number of observed cells, the classic EM, and a quasi-Newton baseline.
Orthogonal and oblique rotation, a simulation/benchmark harness and a small
CLI round out the package.
"""

from ._kernels import BACKEND, get_threads, set_threads
from .em import (
    FactorMoments,
    FullMoments,
    SufficientStats,
    conditional_factor_moments,
    conditional_full_moments,
    estep_modified,
    estep_ordinary,
    fit_em,
    initial_model,
    mstep_modified,
    mstep_ordinary,
)
from .likelihood import PrecisionBlocks, fiml_gradients, fiml_loglik, precision_blocks
from .modelio import (
    LoadedCsv,
    ModelFile,
    load_csv,
    parse_config,
    read_model,
    write_csv,
    write_model,
)
from .quasi_newton import fit_quasi_newton, free_loading_mask, pack, unpack
from .rotation import RotationResult, promax, varimax, varimax_criterion
from .simulate import (
    AccuracyCell,
    CellResult,
    LogisticSelection,
    MetricReport,
    SimDesign,
    TimingRow,
    align_procrustes,
    apply_mcar,
    apply_nmar,
    calibrate_nmar_alpha,
    default_loadings,
    gen_complete_data,
    run_accuracy_experiment,
    run_timing_experiment,
    sqrt_metrics,
    true_model,
)
from .model import (
    PSI_FLOOR,
    EstimationError,
    FactorModel,
    FitConfig,
    FitResult,
    ObservedDataset,
    StartRecord,
    apply_restriction,
    build_pattern_index,
    canonicalize,
    implied_covariance,
    restrict_observed,
)

__version__ = "0.1.0"

__all__ = [
    "AccuracyCell",
    "BACKEND",
    "CellResult",
    "EstimationError",
    "FactorModel",
    "FactorMoments",
    "FitConfig",
    "FitResult",
    "FullMoments",
    "LoadedCsv",
    "LogisticSelection",
    "MetricReport",
    "ModelFile",
    "ObservedDataset",
    "PSI_FLOOR",
    "PrecisionBlocks",
    "RotationResult",
    "SimDesign",
    "StartRecord",
    "SufficientStats",
    "TimingRow",
    "align_procrustes",
    "apply_mcar",
    "apply_nmar",
    "apply_restriction",
    "build_pattern_index",
    "calibrate_nmar_alpha",
    "canonicalize",
    "conditional_factor_moments",
    "conditional_full_moments",
    "default_loadings",
    "estep_modified",
    "estep_ordinary",
    "fiml_gradients",
    "fiml_loglik",
    "fit_em",
    "fit_quasi_newton",
    "free_loading_mask",
    "gen_complete_data",
    "get_threads",
    "implied_covariance",
    "initial_model",
    "load_csv",
    "mstep_modified",
    "mstep_ordinary",
    "pack",
    "parse_config",
    "precision_blocks",
    "promax",
    "read_model",
    "restrict_observed",
    "run_accuracy_experiment",
    "run_timing_experiment",
    "set_threads",
    "sqrt_metrics",
    "true_model",
    "unpack",
    "varimax",
    "varimax_criterion",
    "write_csv",
    "write_model",
]
