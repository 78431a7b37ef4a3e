"""Sklearn-style facade over the functional estimation pipeline.

``SparseSvdRegressor`` fits the sparse-SVD surrogate of the coefficient
matrix and exposes debiased estimates with componentwise confidence
intervals for the weighted right singular vectors.  The module-level
functions are the composition points shared with the command-line front
end: they take already-validated core objects and run the per-layer
debiasing in either orthogonality regime.
"""

from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .inference import IntervalReport, confidence_interval
from .initfit import (
    PenaltyConfig,
    nodewise_precision,
    residual_noise_cov,
    select_rank,
    sparse_svd_fit,
)
from .leftdebias import debias_layer
from .linmodel import (
    GramMatrix,
    RegressionData,
    ScaledFactors,
    SvdFit,
    gram,
    scaled_factors,
)
from .rightdebias import (
    RightDebiasResult,
    strong_aux,
    strong_debias,
    strong_variance_profile,
    weak_aux,
    weak_debias,
    weak_variance_profile,
)

__all__ = ["SparseSvdRegressor", "debias_all_layers", "infer_layers"]


def debias_all_layers(
    mode: str,
    data: RegressionData,
    S: GramMatrix,
    fit: SvdFit,
    factors: ScaledFactors,
    sigma_e: np.ndarray,
    penalty: Optional[PenaltyConfig] = None,
) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Corrected right vectors and raw variance profiles, one per layer.

    The weak path first runs the left-side machinery (nodewise precision
    surrogate, left debiasing, hard thresholding) whose outputs feed both
    the score correction and the cross-layer variance terms.
    """
    if mode not in ("strong", "weak"):
        raise ValueError(f"mode must be 'strong' or 'weak', got {mode!r}")
    v_hats: List[np.ndarray] = []
    profiles: List[np.ndarray] = []
    if mode == "strong":
        for k in range(fit.rank):
            aux = strong_aux(k, factors)
            v_hats.append(strong_debias(k, data, factors, aux))
            profiles.append(strong_variance_profile(k, factors, aux, sigma_e))
        return v_hats, profiles
    theta = nodewise_precision(data, S, penalty).theta
    left = [debias_layer(k, data, fit, factors, S, theta) for k in range(fit.rank)]
    u_thresh = np.column_stack([res.u_hat_t for res in left])
    for k in range(fit.rank):
        aux = weak_aux(k, factors)
        v_hats.append(weak_debias(k, data, factors, u_thresh, aux))
        profiles.append(weak_variance_profile(k, fit, factors, sigma_e, left, S, aux=aux))
    return v_hats, profiles


def infer_layers(
    mode: str,
    data: RegressionData,
    S: GramMatrix,
    fit: SvdFit,
    factors: ScaledFactors,
    sigma_e: np.ndarray,
    penalty: Optional[PenaltyConfig] = None,
) -> List[RightDebiasResult]:
    """Per-layer debias results; raises NotPositive if any plug-in variance
    fails to be strictly positive."""
    v_hats, profiles = debias_all_layers(mode, data, S, fit, factors, sigma_e, penalty)
    return [
        RightDebiasResult(k=k, mode=mode, v_hat=v_hats[k], variances=profiles[k])
        for k in range(fit.rank)
    ]


class SparseSvdRegressor(RegressorMixin, BaseEstimator):
    """Multi-response regression through a sparse SVD of the coefficient
    matrix, with debiased inference on the weighted right singular vectors.

    Parameters
    ----------
    rank : int, optional
        Number of SVD layers.  When omitted, the rank is selected by
        thresholding the singular values of a ridge pilot fit.
    mode : {'weak', 'strong'}
        Orthogonality regime of the latent factors; 'weak' additionally
        corrects for cross-layer contamination through the left-side
        debiasing machinery and is the safe default.
    alpha : float
        Default interval level for :meth:`intervals`.
    penalty : PenaltyConfig, optional
        Penalty levels for the initial fit, precision surrogate, and noise
        covariance thresholding.

    Attributes (after ``fit``)
    --------------------------
    rank_, d_, L_, R_ : fitted sparse SVD.
    coef_ : (p, q) coefficient matrix, so ``predict(X) = X @ coef_``.
    v_hat_ : (q, rank_) debiased weighted right singular vectors.
    variances_ : (q, rank_) plug-in variances of ``sqrt(n) * v_hat_``.
    sigma_e_ : (q, q) thresholded noise covariance estimate.
    """

    def __init__(
        self,
        rank: Optional[int] = None,
        mode: str = "weak",
        alpha: float = 0.05,
        penalty: Optional[PenaltyConfig] = None,
    ) -> None:
        self.rank = rank
        self.mode = mode
        self.alpha = alpha
        self.penalty = penalty

    def fit(self, X, Y) -> "SparseSvdRegressor":
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        data = RegressionData(X=X, Y=Y)
        S = gram(data)
        penalty = self.penalty if self.penalty is not None else PenaltyConfig()
        if self.rank is None:
            rank = select_rank(data, S, r_max=min(data.p, data.q), config=penalty)
        else:
            rank = int(self.rank)
        fit_ = sparse_svd_fit(data, S, rank=rank, config=penalty)
        factors = scaled_factors(data, S, fit_)
        sigma_e = residual_noise_cov(data, fit_, tau=penalty.tau_cov).sigma
        layers = infer_layers(self.mode, data, S, fit_, factors, sigma_e, penalty)

        self.n_ = data.n
        self.n_features_in_ = data.p
        self.rank_ = fit_.rank
        self.d_ = fit_.d
        self.L_ = fit_.L
        self.R_ = fit_.R
        self.coef_ = fit_.coefficient()
        self.factors_ = factors
        self.sigma_e_ = sigma_e
        self.layers_ = tuple(layers)
        self.v_hat_ = np.column_stack([res.v_hat for res in layers])
        self.variances_ = np.column_stack([res.variances for res in layers])
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        return np.asarray(X, dtype=float) @ self.coef_

    def transform(self, X) -> np.ndarray:
        """Coordinates of the rows of X along the fitted left factors."""
        check_is_fitted(self, "L_")
        return np.asarray(X, dtype=float) @ self.L_

    def intervals(self, alpha: Optional[float] = None) -> List[List[IntervalReport]]:
        """Confidence intervals for every component, indexed [layer][coord]."""
        check_is_fitted(self, "v_hat_")
        level = self.alpha if alpha is None else alpha
        return [
            [
                confidence_interval(
                    float(self.v_hat_[j, k]), float(self.variances_[j, k]), self.n_, level
                )
                for j in range(self.v_hat_.shape[0])
            ]
            for k in range(self.rank_)
        ]
