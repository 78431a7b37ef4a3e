"""Debiasing of the weighted left vectors and the thresholded latent factors.

The targets here are the scale-carrying left vectors mu_k = d_k l_k.  Each
layer gets a one-step correction

    mu_hat_k = mu_tilde_k - W_u (g_mu - M_u g_r)

built from the joint squared-error loss over all layers, with the layer's own
right vector r_k acting as the nuisance direction.  Only the trailing layers
j > k enter the nuisance coupling M_u; W_u is the precision surrogate warped
by a small core of dimension r - k - 1.

Hard thresholding at log(n)/sqrt(n) then produces a sparse mu_hat_k^t whose
support feeds the weakly-orthogonal right-factor machinery, together with the
rebuilt latent factor u_hat_k^t = z_k^(-1/2) n^(-1/2) X mu_hat_k^t.  The z_k
normalizer deliberately comes from the unthresholded fit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFactor, NearSingularCore
from .linmodel import GramMatrix, RegressionData, ScaledFactors, SvdFit

__all__ = [
    "LeftDebiasResult",
    "left_aux_matrices",
    "debias_left",
    "hard_threshold",
    "thresholded_factor",
    "debias_layer",
]

_Z_FLOOR = 1e-12
_CORE_COND_LIMIT = 1e12


@dataclass(frozen=True)
class LeftDebiasResult:
    """Everything layer k's left debiasing produces, bundled for reuse.

    ``support`` holds the kept indices of the thresholded vector, and the
    correction pair ``(M_u, W_u)`` is retained because the right-factor
    variance assembly consumes it verbatim.
    """

    k: int
    mu_hat: np.ndarray
    support: np.ndarray
    mu_hat_t: np.ndarray
    u_hat_t: np.ndarray
    M_u: np.ndarray
    W_u: np.ndarray

    def __post_init__(self):
        mu_hat = np.asarray(self.mu_hat, dtype=float).ravel()
        mu_t = np.asarray(self.mu_hat_t, dtype=float).ravel()
        support = np.asarray(self.support, dtype=int).ravel()
        if mu_t.shape != mu_hat.shape:
            raise ValueError("mu_hat and mu_hat_t must have the same length")
        if not np.array_equal(np.flatnonzero(mu_t), np.sort(support)):
            raise ValueError("support must be exactly the nonzero set of mu_hat_t")
        p = mu_hat.size
        M_u = np.asarray(self.M_u, dtype=float)
        W_u = np.asarray(self.W_u, dtype=float)
        if M_u.ndim != 2 or M_u.shape[0] != p:
            raise ValueError("M_u must be p x q")
        if W_u.shape != (p, p):
            raise ValueError("W_u must be p x p")
        object.__setattr__(self, "mu_hat", mu_hat)
        object.__setattr__(self, "mu_hat_t", mu_t)
        object.__setattr__(self, "support", np.sort(support))
        object.__setattr__(self, "u_hat_t", np.asarray(self.u_hat_t, dtype=float).ravel())
        object.__setattr__(self, "M_u", M_u)
        object.__setattr__(self, "W_u", W_u)


def _check_layer(k: int, rank: int):
    if not 0 <= k < rank:
        raise ValueError(f"layer index {k} outside 0..{rank - 1}")


def left_aux_matrices(
    k: int, fit: SvdFit, S: GramMatrix, theta: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Correction pair (M_u, W_u) for layer k.

    ``theta`` is the p x p precision surrogate; rows may come from nodewise
    regressions, so symmetry is not assumed.  For the last layer there is no
    trailing block and the pair degenerates to (0, theta).

    Raises
    ------
    NearSingularCore
        If the trailing-layer core I - z_k^(-1) L2' S L2 has condition number
        above 1e12, meaning the trailing factors are nearly collinear in the
        design metric and the warp is untrustworthy.
    """
    _check_layer(k, fit.rank)
    p = S.p
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (p, p):
        raise ValueError(f"theta must be {p} x {p}, got {theta.shape}")
    Sm = S.matrix
    mu = fit.mu
    zk = float(mu[:, k] @ Sm @ mu[:, k])
    if zk <= _Z_FLOOR:
        raise DegenerateFactor(f"layer {k}: mu' S mu = {zk:.3e}")
    q = fit.R.shape[0]
    if k == fit.rank - 1:
        return np.zeros((p, q)), theta.copy()
    L2 = mu[:, k + 1 :]
    R2 = fit.R[:, k + 1 :]
    SL2 = Sm @ L2
    M_u = -(SL2 @ R2.T) / zk
    core = np.eye(L2.shape[1]) - (L2.T @ SL2) / zk
    cond = np.linalg.cond(core)
    if not np.isfinite(cond) or cond > _CORE_COND_LIMIT:
        raise NearSingularCore(
            f"layer {k}: trailing-core condition number {cond:.3e}"
        )
    W_u = theta @ (np.eye(p) + SL2 @ np.linalg.solve(core, L2.T) / zk)
    return M_u, W_u


def _scores(
    data: RegressionData, S: GramMatrix, MU: np.ndarray, R: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of (2n)^(-1) ||Y - X sum_i mu_i r_i'||_F^2 in (mu_k, r_k).

    Valid at arbitrary factor values with one caveat: g_mu writes the
    coefficient of its own S mu_k term as 1 rather than r_k'r_k, so it is the
    exact mu_k-gradient only on the unit sphere of r_k.  g_r is the plain
    unconstrained r_k-gradient; its leading r_k z_k term is carried inside
    the R @ msm product below.
    """
    n = data.n
    Sm = S.matrix
    smu = Sm @ MU
    w = R.T @ R[:, k]
    w[k] = 0.0  # cross terms only; own term enters with coefficient 1
    g_mu = smu[:, k] - data.X.T @ (data.Y @ R[:, k]) / n + smu @ w
    msm = MU.T @ smu[:, k]
    g_r = R @ msm - data.Y.T @ (data.X @ MU[:, k]) / n
    return g_mu, g_r


def debias_left(
    k: int,
    data: RegressionData,
    fit: SvdFit,
    factors: ScaledFactors,
    S: GramMatrix,
    theta: np.ndarray,
) -> np.ndarray:
    """One-step corrected estimate of mu_k (dense p-vector).

    ``factors`` is checked for layer-count agreement as a guard against mixed
    inputs; the scores recompute z_k from the fit directly, so imperfect z
    bookkeeping cannot leak into the correction.
    """
    if factors.rank != fit.rank:
        raise ValueError("factors and fit disagree on the number of layers")
    M_u, W_u = left_aux_matrices(k, fit, S, theta)
    g_mu, g_r = _scores(data, S, fit.mu, fit.R, k)
    return fit.mu[:, k] - W_u @ (g_mu - M_u @ g_r)


def hard_threshold(mu_hat, n) -> tuple[np.ndarray, np.ndarray]:
    """Keep entries with |mu_hat_j| >= log(n)/sqrt(n), zero the rest.

    Returns the thresholded vector and the sorted array of kept indices.
    """
    if n < 2:
        raise ValueError(f"n must be at least 2, got {n}")
    mu = np.asarray(mu_hat, dtype=float).ravel()
    cut = math.log(n) / math.sqrt(n)
    keep = np.abs(mu) >= cut
    return np.where(keep, mu, 0.0), np.flatnonzero(keep)


def thresholded_factor(
    k: int, data: RegressionData, fit: SvdFit, S: GramMatrix, mu_hat_t
) -> np.ndarray:
    """Latent factor rebuilt from a thresholded left vector.

    The normalizer z_k = mu_tilde_k' S mu_tilde_k always comes from the
    unthresholded fit, even though the direction is the thresholded vector.
    """
    _check_layer(k, fit.rank)
    mu = fit.mu[:, k]
    zk = float(mu @ S.matrix @ mu)
    if zk <= _Z_FLOOR:
        raise DegenerateFactor(f"layer {k}: mu' S mu = {zk:.3e}")
    mu_t = np.asarray(mu_hat_t, dtype=float).ravel()
    if mu_t.size != data.p:
        raise ValueError("thresholded vector length must match the design width")
    return data.X @ mu_t / math.sqrt(zk * data.n)


def debias_layer(
    k: int,
    data: RegressionData,
    fit: SvdFit,
    factors: ScaledFactors,
    S: GramMatrix,
    theta: np.ndarray,
) -> LeftDebiasResult:
    """Debias, threshold, and rebuild the latent factor for one layer."""
    if factors.rank != fit.rank:
        raise ValueError("factors and fit disagree on the number of layers")
    M_u, W_u = left_aux_matrices(k, fit, S, theta)
    g_mu, g_r = _scores(data, S, fit.mu, fit.R, k)
    mu_hat = fit.mu[:, k] - W_u @ (g_mu - M_u @ g_r)
    mu_hat_t, support = hard_threshold(mu_hat, data.n)
    u_hat_t = thresholded_factor(k, data, fit, S, mu_hat_t)
    return LeftDebiasResult(
        k=k,
        mu_hat=mu_hat,
        support=support,
        mu_hat_t=mu_hat_t,
        u_hat_t=u_hat_t,
        M_u=M_u,
        W_u=W_u,
    )
