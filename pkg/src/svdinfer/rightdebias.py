"""Debiased estimation and variance assembly for the right factor vectors.

Two regimes share the one-step template v_hat_k = v_tilde_k - W (g_v - M g_u)
but differ in how the other r - 1 layers are handled.

Strong mode keeps every layer inside one constrained loss; the cross-layer
correction runs through an (r-1) x (r-1) core matrix A, and the procedure is
exact only when the latent factors are (nearly) orthogonal in the design
metric.  Weak mode instead subtracts the other layers from the response using
the thresholded left-debias factors u_hat_i^t, which removes the intrinsic
cross-layer bias at the price of a variance that couples every layer's left
correction into the result.

Both W constructions invert the score linearization exactly:

    W (I_q - M u_k v_k' + M sum_{i != k} u_i v_i') = I_q

whenever the v columns are orthogonal and u_k has unit norm, which the
``ScaledFactors`` container guarantees.  Tests verify the identity against a
dense generic solve.

Variance estimates are componentwise, direction a = e_j.  The scalar
operations evaluate the covariance displays term by term; the *_profile
variants vectorize the same assembly over all q components at once and are
what the simulation harness calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateFactor, NotPositive, SingularA
from .leftdebias import LeftDebiasResult
from .linmodel import GramMatrix, RegressionData, ScaledFactors, SvdFit

__all__ = [
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
]

_COND_LIMIT = 1e12
_VV_FLOOR = 1e-12


@dataclass(frozen=True)
class StrongAux:
    """Strong-mode correction triple for one layer.

    M is q x n, W is q x q, and A is the (r-1) x (r-1) cross-layer core whose
    conditioning is the mode's health signal (empty for r = 1).
    """

    k: int
    M: np.ndarray
    A: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.W, dtype=float)
        M = np.asarray(self.M, dtype=float)
        A = np.asarray(self.A, dtype=float)
        q = W.shape[0]
        if W.shape != (q, q):
            raise ValueError("W must be square")
        if M.ndim != 2 or M.shape[0] != q:
            raise ValueError("M must be q x n")
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "W", W)


@dataclass(frozen=True)
class WeakAux:
    """Weak-mode correction pair for one layer; M is q x n, W is q x q."""

    k: int
    M: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.W, dtype=float)
        M = np.asarray(self.M, dtype=float)
        q = W.shape[0]
        if W.shape != (q, q):
            raise ValueError("W must be square")
        if M.ndim != 2 or M.shape[0] != q:
            raise ValueError("M must be q x n")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "W", W)


@dataclass(frozen=True)
class RightDebiasResult:
    """Debiased estimate of one right factor vector with per-component variances.

    ``variances`` holds the plug-in estimates for directions a = e_j,
    j = 1..q; construction rejects non-positive entries outright since no
    interval exists for them.
    """

    k: int
    mode: str
    v_hat: np.ndarray
    variances: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("strong", "weak"):
            raise ValueError(f"mode must be 'strong' or 'weak', got {self.mode!r}")
        v_hat = np.asarray(self.v_hat, dtype=float).ravel()
        variances = np.asarray(self.variances, dtype=float).ravel()
        if variances.shape != v_hat.shape:
            raise ValueError("variances must have one entry per component")
        if not (variances > 0).all():
            bad = int(np.argmin(variances))
            raise NotPositive(
                f"layer {self.k}, component {bad}: variance {variances[bad]:.3e}"
            )
        object.__setattr__(self, "v_hat", v_hat)
        object.__setattr__(self, "variances", variances)


def _split_layer(factors: ScaledFactors, k: int):
    r = factors.rank
    if not 0 <= k < r:
        raise ValueError(f"layer index {k} outside 0..{r - 1}")
    others = [i for i in range(r) if i != k]
    return factors.U[:, k], factors.V[:, k], factors.U[:, others], factors.V[:, others]


def strong_aux(k: int, factors: ScaledFactors) -> StrongAux:
    """Cross-layer correction for the jointly-constrained (strong) loss.

    Raises
    ------
    SingularA
        If the core A = (v'v) I - V'V U'U (built from the other layers) has
        condition number above 1e12; the layers are then too collinear for
        the strong construction.
    """
    u, v, Um, Vm = _split_layer(factors, k)
    q = v.size
    n = u.size
    vv = float(v @ v)
    if vv <= _VV_FLOOR:
        raise DegenerateFactor(f"layer {k}: v'v = {vv:.3e}")
    if factors.rank == 1:
        return StrongAux(k=k, M=np.zeros((q, n)), A=np.zeros((0, 0)), W=np.eye(q))
    B = Vm @ Um.T
    M = -B / vv
    Gu = Um.T @ Um
    A = vv * np.eye(factors.rank - 1) - (Vm.T @ Vm) @ Gu
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise SingularA(f"layer {k}: core condition number {cond:.3e}")
    K = Vm @ Gu @ np.linalg.solve(A, Vm.T)
    Bs = B @ u
    W = np.eye(q) - np.outer((Bs + K @ Bs) / vv, v) + K
    return StrongAux(k=k, M=M, A=A, W=W)


def strong_debias(
    k: int, data: RegressionData, factors: ScaledFactors, aux: StrongAux
) -> np.ndarray:
    """One-step corrected estimate of v_k under the strong construction.

    u'u is computed rather than assumed 1, so the step is exact for whatever
    factors were supplied.
    """
    u = factors.U[:, k]
    v = factors.V[:, k]
    root_n = math.sqrt(data.n)
    g_v = v * (u @ u) - data.Y.T @ u / root_n
    g_u = u * (v @ v) - data.Y @ v / root_n
    return v - aux.W @ (g_v - aux.M @ g_u)


def _strong_core(
    k: int, factors: ScaledFactors, aux: StrongAux, sigma_e: np.ndarray
) -> np.ndarray:
    """q x q inner matrix of the strong variance sandwich."""
    u = factors.U[:, k]
    v = factors.V[:, k]
    sv = sigma_e @ v
    return (
        sigma_e
        + float(v @ sv) * (aux.M @ aux.M.T)
        - 2.0 * np.outer(aux.M @ u, sv)
    )


def strong_variance(
    k: int, j: int, factors: ScaledFactors, aux: StrongAux, sigma_e: np.ndarray
) -> float:
    """Plug-in variance for component j of the strong estimate."""
    sigma_e = np.asarray(sigma_e, dtype=float)
    core = _strong_core(k, factors, aux, sigma_e)
    out = float(aux.W[j] @ core @ aux.W[j])
    if out <= 0.0:
        raise NotPositive(f"layer {k}, component {j}: variance {out:.3e}")
    return out


def strong_variance_profile(
    k: int, factors: ScaledFactors, aux: StrongAux, sigma_e: np.ndarray
) -> np.ndarray:
    """All q componentwise strong variances at once.

    Returns the raw values without positivity screening; callers decide how
    to flag non-positive entries.
    """
    sigma_e = np.asarray(sigma_e, dtype=float)
    core = _strong_core(k, factors, aux, sigma_e)
    return np.einsum("jq,qt,jt->j", aux.W, core, aux.W)


def weak_aux(k: int, factors: ScaledFactors) -> WeakAux:
    """Single-layer correction pair for the layer-removal (weak) loss."""
    u, v, Um, Vm = _split_layer(factors, k)
    q = v.size
    vv = float(v @ v)
    if vv <= _VV_FLOOR:
        raise DegenerateFactor(f"layer {k}: v'v = {vv:.3e}")
    M = -np.outer(v, u) / vv
    # v (u'U_-k V_-k')' collapses to outer(v, V_-k U_-k'u).
    W = np.eye(q) - 0.5 / vv * np.outer(v, v - Vm @ (Um.T @ u))
    return WeakAux(k=k, M=M, W=W)


def weak_debias(
    k: int,
    data: RegressionData,
    factors: ScaledFactors,
    u_thresh: np.ndarray,
    aux: WeakAux,
) -> np.ndarray:
    """One-step corrected estimate of v_k with the other layers removed.

    ``u_thresh`` is n x r with column i holding the thresholded latent factor
    u_hat_i^t; column k is ignored (the layer under inference is never
    subtracted from itself).
    """
    u = factors.U[:, k]
    v = factors.V[:, k]
    u_thresh = np.asarray(u_thresh, dtype=float)
    if u_thresh.shape != (data.n, factors.rank):
        raise ValueError("u_thresh must be n x r")
    others = [i for i in range(factors.rank) if i != k]
    Vm = factors.V[:, others]
    Ut = u_thresh[:, others]
    root_n = math.sqrt(data.n)
    g_v = v * (u @ u) - data.Y.T @ u / root_n + Vm @ (Ut.T @ u)
    g_u = u * (v @ v) - data.Y @ v / root_n + Ut @ (Vm.T @ v)
    return v - aux.W @ (g_v - aux.M @ g_u)


def omega(
    k: int,
    i: int,
    factors: ScaledFactors,
    aux: WeakAux,
    R: np.ndarray,
    j: int,
) -> float:
    """Coupling weight of layer i's left correction on component j of layer k.

    Plug-in form z_k^(-1/2) e_j' W r_i; the right vectors come from the fit,
    not from the scaled factors.
    """
    if i == k:
        raise ValueError("omega is defined for i != k only")
    R = np.asarray(R, dtype=float)
    return float(aux.W[j] @ R[:, i]) / math.sqrt(float(factors.z[k]))


def _weak_blocks(
    k: int,
    fit: SvdFit,
    factors: ScaledFactors,
    sigma_e: np.ndarray,
    left: Sequence[LeftDebiasResult],
    S: GramMatrix,
    aux: WeakAux,
):
    """Shared per-layer precomputation for the weak variance assembly.

    Builds, for every other layer i: the support-restricted direction
    a_i = restrict(S mu_k, S_i), b_i = W_u_i' a_i, and m_i = M_u_i' b_i.  An
    empty support S_i makes a_i = 0 and silently zeroes that layer's
    contribution; that is the intended degenerate behavior, not an error.
    """
    r = fit.rank
    if len(left) != r:
        raise ValueError("need one left-debias result per layer")
    Sm = S.matrix
    L = fit.L
    R = fit.R
    d = fit.d
    lsl = float(L[:, k] @ Sm @ L[:, k])
    root_lsl = math.sqrt(lsl)
    dk = float(d[k])
    mu = fit.mu
    M_v = -np.outer(R[:, k], L[:, k]) / (dk * lsl)
    MvS = M_v @ Sm
    zk = float(factors.z[k])
    # cov_vv inner matrix, the exact analogue of the strong core.
    se_rk = sigma_e @ R[:, k]
    core = (
        sigma_e
        + (dk**2 * lsl) * float(R[:, k] @ se_rk) * (MvS @ M_v.T)
        - 2.0 * np.outer(MvS @ mu[:, k], se_rk)
    )
    others = [i for i in range(r) if i != k]
    smu_k = Sm @ mu[:, k]
    blocks = []
    for i in others:
        res = left[i]
        if res.k != i:
            raise ValueError("left results must be ordered by layer")
        a_i = np.zeros(S.p)
        a_i[res.support] = smu_k[res.support]
        b_i = res.W_u.T @ a_i
        m_i = res.M_u.T @ b_i
        blocks.append((i, a_i, b_i, m_i))
    return others, blocks, M_v, MvS, core, lsl, root_lsl, dk, zk


def weak_variance(
    k: int,
    j: int,
    fit: SvdFit,
    factors: ScaledFactors,
    sigma_e: np.ndarray,
    left: Sequence[LeftDebiasResult],
    S: GramMatrix,
    aux: WeakAux | None = None,
) -> float:
    """Plug-in variance for component j of the weak estimate.

    Assembles the own-layer covariance, the cross covariances with every
    other layer's left correction, and the pairwise covariances among those
    corrections, each written out term by term.
    """
    sigma_e = np.asarray(sigma_e, dtype=float)
    if aux is None:
        aux = weak_aux(k, factors)
    others, blocks, M_v, MvS, core, lsl, root_lsl, dk, zk = _weak_blocks(
        k, fit, factors, sigma_e, left, S, aux
    )
    Sm = S.matrix
    L = fit.L
    R = fit.R
    d = fit.d
    mu = fit.mu
    a_row = aux.W[j]
    acc = float(a_row @ core @ a_row)
    root_zk = math.sqrt(zk)
    for i, _, b_i, m_i in blocks:
        w_i = float(a_row @ R[:, i]) / root_zk
        cvu = (
            float(d[i]) / root_lsl * float(L[:, i] @ Sm @ L[:, k])
            * float(a_row @ sigma_e @ m_i)
            - float(a_row @ (MvS @ mu[:, i])) * dk * root_lsl
            * float(R[:, k] @ sigma_e @ m_i)
            - float(b_i @ Sm @ L[:, k]) / root_lsl
            * float(a_row @ sigma_e @ R[:, i])
            + float(a_row @ (MvS @ b_i)) * dk * root_lsl
            * float(R[:, k] @ sigma_e @ R[:, i])
        )
        acc -= 2.0 * w_i * cvu
    for i, _, b_i, m_i in blocks:
        w_i = float(a_row @ R[:, i]) / root_zk
        for i2, _, b_i2, m_i2 in blocks:
            w_i2 = float(a_row @ R[:, i2]) / root_zk
            cuu = (
                float(d[i]) * float(d[i2]) * float(L[:, i] @ Sm @ L[:, i2])
                * float(m_i @ sigma_e @ m_i2)
                - float(b_i @ Sm @ mu[:, i2]) * float(R[:, i] @ sigma_e @ m_i2)
                - float(b_i2 @ Sm @ mu[:, i]) * float(R[:, i2] @ sigma_e @ m_i)
                + float(b_i @ Sm @ b_i2) * float(R[:, i] @ sigma_e @ R[:, i2])
            )
            acc += w_i * w_i2 * cuu
    if acc <= 0.0:
        raise NotPositive(f"layer {k}, component {j}: variance {acc:.3e}")
    return acc


def weak_variance_profile(
    k: int,
    fit: SvdFit,
    factors: ScaledFactors,
    sigma_e: np.ndarray,
    left: Sequence[LeftDebiasResult],
    S: GramMatrix,
    aux: WeakAux | None = None,
) -> np.ndarray:
    """All q componentwise weak variances at once.

    Same assembly as ``weak_variance`` with the direction-dependent pieces
    vectorized over j; the cross-layer blocks are direction-free and computed
    once.  Returns raw values without positivity screening.
    """
    sigma_e = np.asarray(sigma_e, dtype=float)
    if aux is None:
        aux = weak_aux(k, factors)
    others, blocks, M_v, MvS, core, lsl, root_lsl, dk, zk = _weak_blocks(
        k, fit, factors, sigma_e, left, S, aux
    )
    Sm = S.matrix
    L = fit.L
    R = fit.R
    d = fit.d
    mu = fit.mu
    W = aux.W
    out = np.einsum("jq,qt,jt->j", W, core, W)
    if not others:
        return out
    m = len(others)
    # Coupling weights Omega[j, i] and the four cross-term columns, per layer.
    Omega = (W @ R[:, others]) / math.sqrt(zk)
    Cvu = np.empty((W.shape[0], m))
    Quu = np.empty((m, m))
    for a, (i, _, b_i, m_i) in enumerate(blocks):
        c1 = float(d[i]) / root_lsl * float(L[:, i] @ Sm @ L[:, k])
        c2 = dk * root_lsl * float(R[:, k] @ sigma_e @ m_i)
        c3 = float(b_i @ Sm @ L[:, k]) / root_lsl
        c4 = dk * root_lsl * float(R[:, k] @ sigma_e @ R[:, i])
        Cvu[:, a] = (
            c1 * (W @ (sigma_e @ m_i))
            - (W @ (MvS @ mu[:, i])) * c2
            - c3 * (W @ (sigma_e @ R[:, i]))
            + (W @ (MvS @ b_i)) * c4
        )
        for a2, (i2, _, b_i2, m_i2) in enumerate(blocks):
            Quu[a, a2] = (
                float(d[i]) * float(d[i2]) * float(L[:, i] @ Sm @ L[:, i2])
                * float(m_i @ sigma_e @ m_i2)
                - float(b_i @ Sm @ mu[:, i2]) * float(R[:, i] @ sigma_e @ m_i2)
                - float(b_i2 @ Sm @ mu[:, i]) * float(R[:, i2] @ sigma_e @ m_i)
                + float(b_i @ Sm @ b_i2) * float(R[:, i] @ sigma_e @ R[:, i2])
            )
    out -= 2.0 * np.einsum("ji,ji->j", Omega, Cvu)
    out += np.einsum("ji,ik,jk->j", Omega, Quu, Omega)
    return out
