"""Penalized G-estimation of proximal treatment-effect heterogeneity.

The package estimates linear treatment-blip models for repeated outcomes
with data-adaptive effect-modifier selection, and provides three routes to
post-selection uncertainty: naive sandwich intervals, simultaneous
multiplier-bootstrap intervals, and decorrelated-score one-step intervals.
"""

__version__ = "0.1.0"

from .correlation import WorkingCorrelation, estimate_correlation, materialize_correlation
from .data import (
    ColumnSchema,
    Dataset,
    ModelIndexSet,
    blipped_down,
    load_dataset,
    standardize_dataset,
)
from .dscore import (
    DscoreReport,
    OneStepResult,
    ScoreDecomposition,
    cv_fold_losses,
    cv_select_lambda_w,
    decorrelated_score,
    efficient_scores,
    estimate_weights,
    infer_all,
    one_step,
)
from .errors import (
    ConvergenceError,
    DataError,
    NumericalError,
    PegError,
    RankDeficiencyError,
    SeparationError,
)
from .estimator import (
    FitControls,
    Interval,
    MomentCache,
    MomentMatrices,
    PenalizedFit,
    ScadPenalty,
    TuneResult,
    assemble_fit,
    g_estimate,
    moment_matrices,
    penalized_g_fit,
    sandwich_ci,
    scad_derivative,
    scad_penalty_value,
    tune_lambda,
)
from .propensity import PropensityModel, fit_propensity
from .simlab import (
    METHODS,
    SimConfig,
    SimResult,
    SimTruth,
    TrueParams,
    compute_metrics,
    generate_dataset,
    run_replications,
)
from .uposi import (
    BootstrapQuantiles,
    UposiReport,
    ZVectors,
    build_z_vectors,
    eigen_diagnostic,
    multiplier_bootstrap,
    uposi_infer,
    uposi_intervals,
    uposi_region_check,
)

__all__ = [
    "__version__",
    "WorkingCorrelation", "estimate_correlation", "materialize_correlation",
    "ColumnSchema", "Dataset", "ModelIndexSet", "blipped_down", "load_dataset",
    "standardize_dataset",
    "DscoreReport", "OneStepResult", "ScoreDecomposition", "cv_fold_losses",
    "cv_select_lambda_w", "decorrelated_score", "efficient_scores",
    "estimate_weights", "infer_all", "one_step",
    "ConvergenceError", "DataError", "NumericalError", "PegError",
    "RankDeficiencyError", "SeparationError",
    "FitControls", "Interval", "MomentCache", "MomentMatrices", "PenalizedFit",
    "ScadPenalty", "TuneResult", "assemble_fit", "g_estimate", "moment_matrices",
    "penalized_g_fit", "sandwich_ci", "scad_derivative", "scad_penalty_value",
    "tune_lambda",
    "PropensityModel", "fit_propensity",
    "METHODS", "SimConfig", "SimResult", "SimTruth", "TrueParams",
    "compute_metrics", "generate_dataset", "run_replications",
    "BootstrapQuantiles", "UposiReport", "ZVectors", "build_z_vectors",
    "eigen_diagnostic", "multiplier_bootstrap", "uposi_infer", "uposi_intervals",
    "uposi_region_check",
]
