"""Varying-smoother models for functional responses.

Fits smooth mean surfaces f(t, s) to functional-response data by three
estimator families (tensor-product penalized OLS/GLS, smoothed FPC scores,
and two-step smoothing), with pointwise degrees of freedom diagnostics,
banded-precision prewhitening, and a simulation laboratory.
"""

from .basis import (
    BasisSpec,
    EvaluatedBasis,
    build_basis,
    derivative_penalty,
    difference_penalty,
    eval_basis_deriv,
    exact_gram,
    weighted_gram,
)
from .covest import PrecisionEstimate, banded_precision, select_bandwidth
from .dataio import Dataset, RunConfig, emit, ingest
from .diagnostics import (
    build_hat_matrix,
    ci_twostep,
    functional_r2,
    ise_metrics,
    pointwise_df_fpc,
    pointwise_df_tp,
    pointwise_df_twostep,
    pointwise_df_vc,
    pointwise_leverage,
    residual_covariance,
)
from .fpca import FpcaModel, FpcScoresFit, fit_fpc_scores, fpca_decompose
from .simlab import (
    Scenario,
    SimulatedDataset,
    calibrate_r2,
    gen_errors,
    run_study,
    simulate,
    true_surface,
    true_surface_deriv_t,
)
from .smoothcore import (
    ColumnSmoothResult,
    DrDecomposition,
    demmler_reinsch,
    penalized_lstsq,
    reml_score,
    select_lambda_reml,
    smooth_columns,
)
from .tensorfit import VsFit, assemble_penalty, fit_tp_gls, fit_tp_ols
from .twostep import (
    TwoStepFit,
    cross_validate,
    step1,
    step2_fpc,
    step2_penalized,
    step2_penfpc,
)

__all__ = [
    "BasisSpec",
    "EvaluatedBasis",
    "build_basis",
    "derivative_penalty",
    "difference_penalty",
    "eval_basis_deriv",
    "exact_gram",
    "weighted_gram",
    "ColumnSmoothResult",
    "DrDecomposition",
    "demmler_reinsch",
    "penalized_lstsq",
    "reml_score",
    "select_lambda_reml",
    "smooth_columns",
    "VsFit",
    "assemble_penalty",
    "fit_tp_ols",
    "fit_tp_gls",
    "PrecisionEstimate",
    "banded_precision",
    "select_bandwidth",
    "FpcaModel",
    "FpcScoresFit",
    "fpca_decompose",
    "fit_fpc_scores",
    "TwoStepFit",
    "step1",
    "step2_penalized",
    "step2_fpc",
    "step2_penfpc",
    "cross_validate",
    "pointwise_df_tp",
    "pointwise_df_fpc",
    "pointwise_df_twostep",
    "pointwise_df_vc",
    "pointwise_leverage",
    "build_hat_matrix",
    "functional_r2",
    "ise_metrics",
    "residual_covariance",
    "ci_twostep",
    "Scenario",
    "SimulatedDataset",
    "true_surface",
    "true_surface_deriv_t",
    "gen_errors",
    "calibrate_r2",
    "simulate",
    "run_study",
    "Dataset",
    "RunConfig",
    "ingest",
    "emit",
]

__version__ = "0.1.0"
