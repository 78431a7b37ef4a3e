"""Debiased inference for latent right factors of sparse SVDs in
multi-response linear regression.

The package splits into a small functional core (linmodel, initfit,
leftdebias, rightdebias, inference), a simulation harness (simlab), a
sklearn-style facade (estimator), and a CLI (cli).
"""

from .errors import (
    DegenerateFactor,
    DesignScaleWarning,
    FactorModelError,
    NearSingularCore,
    NoConvergenceWarning,
    NotPositive,
    RankDeficient,
    SingularA,
    SingularColumn,
    SingularSigma11,
    TiedSingularValues,
)
from .inference import (
    IntervalReport,
    confidence_interval,
    covers,
    normal_cdf,
    normal_pdf,
    normal_quantile,
    standardized_stat,
)
from .initfit import (
    NoiseCovEstimate,
    PenaltyConfig,
    PrecisionEstimate,
    nodewise_precision,
    residual_noise_cov,
    select_rank,
    sparse_svd_fit,
)
from .leftdebias import (
    LeftDebiasResult,
    debias_layer,
    debias_left,
    hard_threshold,
    left_aux_matrices,
    thresholded_factor,
)
from .linmodel import (
    GramMatrix,
    RegressionData,
    ScaledFactors,
    SvdFit,
    factor_gram,
    gram,
    load_matrix_csv,
    scaled_factors,
)
from .rightdebias import (
    RightDebiasResult,
    StrongAux,
    WeakAux,
    omega,
    strong_aux,
    strong_debias,
    strong_variance,
    strong_variance_profile,
    weak_aux,
    weak_debias,
    weak_variance,
    weak_variance_profile,
)
from .estimator import SparseSvdRegressor, debias_all_layers, infer_layers
from .simlab import (
    McSummary,
    RepRecord,
    RepResult,
    SimConfig,
    TrueModel,
    align_signs,
    default_track,
    gen_coefficients,
    gen_design_conditional,
    gen_design_iid,
    gen_noise,
    kde,
    ks_normal,
    monte_carlo,
    preset,
    run_replication,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "FactorModelError",
    "DegenerateFactor",
    "RankDeficient",
    "TiedSingularValues",
    "SingularColumn",
    "NearSingularCore",
    "SingularA",
    "SingularSigma11",
    "NotPositive",
    "NoConvergenceWarning",
    "DesignScaleWarning",
    "RegressionData",
    "GramMatrix",
    "SvdFit",
    "ScaledFactors",
    "gram",
    "scaled_factors",
    "factor_gram",
    "load_matrix_csv",
    "PenaltyConfig",
    "PrecisionEstimate",
    "NoiseCovEstimate",
    "sparse_svd_fit",
    "select_rank",
    "nodewise_precision",
    "residual_noise_cov",
    "IntervalReport",
    "confidence_interval",
    "standardized_stat",
    "covers",
    "normal_quantile",
    "normal_cdf",
    "normal_pdf",
    "LeftDebiasResult",
    "left_aux_matrices",
    "debias_left",
    "hard_threshold",
    "thresholded_factor",
    "debias_layer",
    "StrongAux",
    "WeakAux",
    "RightDebiasResult",
    "strong_aux",
    "strong_debias",
    "strong_variance",
    "strong_variance_profile",
    "weak_aux",
    "weak_debias",
    "omega",
    "weak_variance",
    "weak_variance_profile",
    "SimConfig",
    "TrueModel",
    "preset",
    "default_track",
    "gen_coefficients",
    "gen_design_conditional",
    "gen_design_iid",
    "gen_noise",
    "kde",
    "ks_normal",
    "RepRecord",
    "RepResult",
    "McSummary",
    "align_signs",
    "run_replication",
    "monte_carlo",
    "SparseSvdRegressor",
    "debias_all_layers",
    "infer_layers",
]
