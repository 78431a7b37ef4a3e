"""Initial sparse estimation for the factor model.

Provides the inputs the debiasing stages build on:

* ``sparse_svd_fit`` -- a sparse singular value decomposition of the
  coefficient matrix, fit by sequential rank-one deflation with an l1
  penalty on the left vector and a soft-thresholded closed form for the
  right vector, then re-decomposed exactly so the returned factors satisfy
  the orthonormality contracts of :class:`~svdinfer.linmodel.SvdFit`
  to machine precision.
* ``select_rank`` -- singular value thresholding of the ridge pilot fit.
* ``nodewise_precision`` -- row-wise lasso estimate of the precision matrix
  of the design, used to relax the left singular vectors.
* ``residual_noise_cov`` -- adaptive entrywise thresholding of the residual
  covariance with a projection onto the positive semidefinite cone.

All lasso subproblems run in covariance form: the coordinate updates touch
only the Gram matrix and a covariance vector, never the raw design, so one
sweep costs O(p^2) regardless of n.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .errors import NoConvergenceWarning, NotPositive, RankDeficient, SingularColumn
from .linmodel import GramMatrix, RegressionData, SvdFit

__all__ = [
    "PenaltyConfig",
    "PrecisionEstimate",
    "NoiseCovEstimate",
    "sparse_svd_fit",
    "select_rank",
    "nodewise_precision",
    "residual_noise_cov",
]

_TINY = 1e-12


def _check_level(name: str, value: Union[float, str]) -> None:
    if isinstance(value, str):
        if value != "auto":
            raise ValueError(f"{name} must be 'auto' or a nonnegative float, got {value!r}")
    elif not (isinstance(value, (int, float)) and value >= 0.0 and math.isfinite(value)):
        raise ValueError(f"{name} must be 'auto' or a nonnegative float, got {value!r}")


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty levels and solver controls for the initial fits.

    ``lambda_factor`` penalizes the left vectors of the sparse SVD and
    ``lambda_node`` the nodewise regressions; either may be the string
    ``"auto"``, in which case the noise-scaled sqrt(2 log(dim) / n) default
    is used.  ``tau_cov`` scales the adaptive threshold of the residual
    covariance and ``rank_c`` the singular value threshold of the rank
    selector.
    """

    lambda_factor: Union[float, str] = "auto"
    lambda_node: Union[float, str] = "auto"
    max_iter: int = 500
    tol: float = 1e-8
    tau_cov: float = 2.0
    rank_c: float = 2.0

    def __post_init__(self) -> None:
        _check_level("lambda_factor", self.lambda_factor)
        _check_level("lambda_node", self.lambda_node)
        if not (isinstance(self.max_iter, int) and self.max_iter >= 1):
            raise ValueError(f"max_iter must be a positive integer, got {self.max_iter}")
        if not self.tol > 0.0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if not self.tau_cov >= 0.0:
            raise ValueError(f"tau_cov must be nonnegative, got {self.tau_cov}")
        if not self.rank_c > 0.0:
            raise ValueError(f"rank_c must be positive, got {self.rank_c}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "PenaltyConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(payload) - known
        if extra:
            raise ValueError(f"unknown penalty fields: {sorted(extra)}")
        return cls(**payload)


@dataclass(frozen=True)
class PrecisionEstimate:
    """Nodewise-lasso precision estimate of the design covariance.

    ``identity_gap`` is max|I - theta @ gram|, a diagnostic for how far the
    relaxation is from an exact inverse; ``max_row_support`` is the largest
    number of nonzeros in any row of ``theta``.
    """

    theta: np.ndarray
    max_row_support: int
    identity_gap: float

    def __post_init__(self) -> None:
        th = self.theta
        if th.ndim != 2 or th.shape[0] != th.shape[1]:
            raise ValueError(f"theta must be square, got shape {th.shape}")
        if not np.isfinite(th).all():
            raise ValueError("theta has nonfinite entries")


@dataclass(frozen=True)
class NoiseCovEstimate:
    """Thresholded residual covariance, projected to be positive semidefinite."""

    sigma: np.ndarray
    tau: float

    def __post_init__(self) -> None:
        s = self.sigma
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ValueError(f"sigma must be square, got shape {s.shape}")
        if not np.isfinite(s).all():
            raise ValueError("sigma has nonfinite entries")
        scale = max(np.abs(s).max(), 1.0)
        if np.abs(s - s.T).max() > 1e-10 * scale:
            raise ValueError("sigma must be symmetric")
        w = np.linalg.eigvalsh(s)
        if w.min() < -1e-8 * max(w.max(), _TINY):
            raise NotPositive(f"sigma has negative eigenvalue {w.min()}")


def _soft(x: np.ndarray, level: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - level, 0.0)


def _cd_lasso(
    G: np.ndarray,
    c: np.ndarray,
    lam: float,
    max_iter: int,
    tol: float,
    w0: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, bool]:
    """Coordinate descent for min_w  w'Gw/2 - c'w + lam * |w|_1.

    With G = A'A/n and c = A'y/n this is the lasso in covariance form.
    Maintains the running gradient g = Gw so each coordinate update is O(p).
    Returns the solution and a convergence flag.
    """
    dim = c.shape[0]
    w = np.zeros(dim) if w0 is None else np.array(w0, dtype=float)
    g = G @ w
    diag = np.diag(G).copy()
    active = diag > _TINY
    converged = False
    for _ in range(max_iter):
        delta_max = 0.0
        for j in range(dim):
            if not active[j]:
                continue
            old = w[j]
            marginal = c[j] - g[j] + diag[j] * old
            new = _soft(np.asarray(marginal), lam) / diag[j]
            new = float(new)
            if new != old:
                g += G[:, j] * (new - old)
                w[j] = new
                step = abs(new - old)
                if step > delta_max:
                    delta_max = step
        if delta_max <= tol * (1.0 + np.abs(w).max()):
            converged = True
            break
    return w, converged


def _ridge_pilot(data: RegressionData, S: GramMatrix) -> Tuple[np.ndarray, float]:
    """Ridge coefficient pilot and the residual noise scale it implies.

    The ridge level sqrt(log p / n) * trace(Sigma_hat) / p is scale-aware
    and vanishing, so the pilot is consistent while staying well posed when
    p is close to n.
    """
    n, p = data.X.shape
    q = data.Y.shape[1]
    lam = math.sqrt(math.log(max(p, 2)) / n) * np.trace(S.matrix) / p
    lhs = n * S.matrix + lam * np.eye(p)
    c0 = np.linalg.solve(lhs, data.X.T @ data.Y)
    resid = data.Y - data.X @ c0
    dof = max(n - p, 1) * q
    sigma = math.sqrt(float(np.sum(resid * resid)) / dof)
    return c0, sigma


def select_rank(
    data: RegressionData,
    S: GramMatrix,
    r_max: int,
    config: Optional[PenaltyConfig] = None,
) -> int:
    """Estimate the factor rank by thresholding the singular values of the
    fitted signal matrix X @ C0 / sqrt(n) from the ridge pilot at the noise
    floor rank_c * sigma_hat * (sqrt(p) + sqrt(q)) / sqrt(n)."""
    if r_max < 1:
        raise ValueError(f"r_max must be at least 1, got {r_max}")
    cfg = config or PenaltyConfig()
    c0, sigma = _ridge_pilot(data, S)
    n, p = data.X.shape
    q = data.Y.shape[1]
    sv = np.linalg.svd(data.X @ c0 / math.sqrt(n), compute_uv=False)
    tau = cfg.rank_c * sigma * (math.sqrt(p) + math.sqrt(q)) / math.sqrt(n)
    r_hat = int(np.sum(sv > tau))
    return min(max(r_hat, 1), r_max)


def sparse_svd_fit(
    data: RegressionData,
    S: GramMatrix,
    rank: int,
    config: Optional[PenaltyConfig] = None,
) -> SvdFit:
    """Sparse SVD of the coefficient matrix by sequential rank-one deflation.

    Each layer alternates an l1-penalized left update (lasso of the current
    residual projected on the right vector against the design) with a
    closed-form soft-thresholded right update, warm-started from the top
    pair of the deflated ridge pilot.  The stacked rank-one layers are then
    re-decomposed by a dense SVD so the output exactly satisfies the factor
    orthonormality contracts; signs are fixed so each left vector's largest
    magnitude entry is positive.

    Raises
    ------
    RankDeficient
        If a requested layer vanishes under the penalty or the stacked fit
        has numerical rank below ``rank``.
    """
    cfg = config or PenaltyConfig()
    n, p = data.X.shape
    q = data.Y.shape[1]
    if not 1 <= rank <= min(p, q):
        raise ValueError(f"rank must be in [1, min(p, q)] = [1, {min(p, q)}], got {rank}")
    pilot, sigma = _ridge_pilot(data, S)
    G = S.matrix
    auto_level = isinstance(cfg.lambda_factor, str)
    if auto_level:
        lam_left = sigma * math.sqrt(2.0 * math.log(max(p, 2)) / n)
        lam_right_scale = sigma * math.sqrt(2.0 * math.log(max(q, 2)) / n)
    else:
        lam_left = float(cfg.lambda_factor)
        lam_right_scale = float(cfg.lambda_factor)

    resid = data.Y.copy()
    deflated = pilot.copy()
    layers = []
    hit_max_iter = False
    for k in range(rank):
        u0, s0, v0t = np.linalg.svd(deflated)
        if s0[0] <= _TINY:
            raise RankDeficient(f"pilot is numerically rank {k}, cannot fit layer {k}")
        w = u0[:, 0] * s0[0]
        rho = v0t[0]
        prev_layer = np.outer(w, rho)
        layer = prev_layer
        converged = False
        for _ in range(cfg.max_iter):
            # Left update: lasso of resid @ rho on X, in covariance form.
            c_vec = data.X.T @ (resid @ rho) / n
            w, _ = _cd_lasso(G, c_vec, lam_left, cfg.max_iter, cfg.tol, w0=w)
            if not np.any(w):
                raise RankDeficient(f"layer {k} left vector vanished under the penalty")
            w_s_w = float(w @ G @ w)
            if w_s_w <= _TINY:
                raise RankDeficient(f"layer {k} has degenerate design scale")
            # Right update: soft-threshold the covariance with the fitted score.
            b = resid.T @ (data.X @ w) / n
            # The auto right level rides on the fitted score norm so the
            # threshold matches the scale of b; an explicit level is taken
            # verbatim.
            lam_right = lam_right_scale * math.sqrt(w_s_w) if auto_level else lam_right_scale
            rho_raw = _soft(b, lam_right) / w_s_w
            scale = float(np.linalg.norm(rho_raw))
            if scale == 0.0:
                raise RankDeficient(f"layer {k} right vector vanished under the penalty")
            rho = rho_raw / scale
            layer = np.outer(w * scale, rho)
            gap = np.linalg.norm(layer - prev_layer) / max(np.linalg.norm(prev_layer), _TINY)
            prev_layer = layer
            if gap <= cfg.tol:
                converged = True
                break
        if not converged:
            hit_max_iter = True
        layers.append(layer)
        resid = resid - data.X @ layer
        deflated = deflated - layer
    if hit_max_iter:
        warnings.warn(
            "sparse SVD alternation hit max_iter before the layer change "
            "dropped below tol; returning the last iterate",
            NoConvergenceWarning,
            stacklevel=2,
        )
    c_hat = np.sum(layers, axis=0)
    u, s, vt = np.linalg.svd(c_hat)
    if s[rank - 1] <= 1e-12 * max(s[0], _TINY):
        raise RankDeficient(
            f"stacked fit has numerical rank below {rank} (singular values {s[:rank]})"
        )
    L = u[:, :rank].copy()
    R = vt[:rank].T.copy()
    for i in range(rank):
        j = int(np.argmax(np.abs(L[:, i])))
        if L[j, i] < 0.0:
            L[:, i] = -L[:, i]
            R[:, i] = -R[:, i]
    return SvdFit(d=s[:rank].copy(), L=L, R=R)


def nodewise_precision(
    data: RegressionData,
    S: GramMatrix,
    config: Optional[PenaltyConfig] = None,
) -> PrecisionEstimate:
    """Row-wise lasso precision estimate of the design covariance.

    Row j regresses column j of the design on the others; the diagonal is
    the reciprocal of the penalized residual variance
    tau_j^2 = |X_j - X_{-j} gamma|^2 / n + lam |gamma|_1 and the off-diagonal
    entries are -gamma / tau_j^2.  With lam = 0 and n > p this reduces to
    the exact inverse Gram matrix.

    Raises
    ------
    SingularColumn
        If some penalized residual variance falls below 1e-12, meaning the
        corresponding design column is (nearly) in the span of the others.
    """
    cfg = config or PenaltyConfig()
    n, p = data.X.shape
    lam = (
        math.sqrt(2.0 * math.log(max(p, 2)) / n)
        if isinstance(cfg.lambda_node, str)
        else float(cfg.lambda_node)
    )
    G = S.matrix
    if G.shape[0] != p:
        raise ValueError(f"gram matrix is {G.shape[0]}x{G.shape[0]} but design has {p} columns")
    theta = np.zeros((p, p))
    if p == 1:
        tau2 = float(G[0, 0])
        if tau2 < _TINY:
            raise SingularColumn("the single design column has (near) zero scale")
        theta[0, 0] = 1.0 / tau2
    else:
        for j in range(p):
            idx = np.arange(p) != j
            g_sub = G[np.ix_(idx, idx)]
            c_sub = G[idx, j]
            gamma, _ = _cd_lasso(g_sub, c_sub, lam, cfg.max_iter, cfg.tol)
            tau2 = (
                float(G[j, j])
                - 2.0 * float(gamma @ c_sub)
                + float(gamma @ g_sub @ gamma)
                + lam * float(np.abs(gamma).sum())
            )
            if tau2 < _TINY:
                raise SingularColumn(
                    f"design column {j} is numerically in the span of the others"
                )
            theta[j, j] = 1.0 / tau2
            theta[j, idx] = -gamma / tau2
    gap = float(np.abs(np.eye(p) - theta @ G).max())
    support = int(np.max(np.sum(theta != 0.0, axis=1)))
    return PrecisionEstimate(theta=theta, max_row_support=support, identity_gap=gap)


def residual_noise_cov(
    data: RegressionData,
    fit: SvdFit,
    tau: float = 2.0,
) -> NoiseCovEstimate:
    """Adaptive entrywise thresholding of the residual covariance.

    Entry (a, b) of the raw residual covariance survives when its magnitude
    is at least tau * sqrt(theta_ab * log(q) / n), where theta_ab is the
    empirical variance of the products E_ta E_tb; the diagonal always
    survives.  Negative eigenvalues introduced by thresholding are clipped
    to zero.
    """
    if tau < 0.0:
        raise ValueError(f"tau must be nonnegative, got {tau}")
    n = data.n
    q = data.Y.shape[1]
    resid = data.Y - data.X @ fit.coefficient()
    S_raw = resid.T @ resid / n
    S_raw = (S_raw + S_raw.T) / 2.0
    sq = resid * resid
    m2 = sq.T @ sq / n
    theta = m2 - S_raw * S_raw
    theta = np.maximum((theta + theta.T) / 2.0, 0.0)
    thr = tau * np.sqrt(theta * math.log(max(q, 2)) / n)
    keep = np.abs(S_raw) >= thr
    np.fill_diagonal(keep, True)
    S_thr = np.where(keep, S_raw, 0.0)
    S_thr = (S_thr + S_thr.T) / 2.0
    w, vecs = np.linalg.eigh(S_thr)
    if w.min() < 0.0:
        w = np.maximum(w, 0.0)
        S_thr = (vecs * w) @ vecs.T
        S_thr = (S_thr + S_thr.T) / 2.0
    return NoiseCovEstimate(sigma=S_thr, tau=float(tau))
