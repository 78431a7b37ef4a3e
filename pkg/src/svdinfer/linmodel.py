"""Core data model: regression data, Gram matrix, SVD fits, scaled factors.

The observation model is ``Y = X C + E`` with a fixed design ``X`` (n x p),
responses ``Y`` (n x q), and a coefficient matrix ``C`` of low rank r carrying
a sparse SVD ``C = sum_i d_i l_i r_i'``.  All inference downstream runs on the
variance-adjusted latent factors

    u_i = (l_i' S l_i)^(-1/2) n^(-1/2) X l_i      (n-vector, unit norm),
    v_i = (l_i' S l_i)^(+1/2) d_i r_i             (q-vector),

where ``S = X'X / n`` is the Gram matrix.  The u_i are generally correlated;
the v_i are exactly orthogonal whenever the fitted right vectors are
orthonormal, with squared norms z_i = d_i^2 l_i' S l_i.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFactor, DesignScaleWarning, TiedSingularValues

__all__ = [
    "RegressionData",
    "GramMatrix",
    "SvdFit",
    "ScaledFactors",
    "gram",
    "scaled_factors",
    "factor_gram",
    "load_matrix_csv",
]

# Validation tolerances for the type invariants below.
_SYM_TOL = 1e-10
_PSD_TOL = 1e-8
_ORTHO_TOL = 1e-8
_TIE_REL = 1e-10
_DEGENERATE_TOL = 1e-12


def _as_matrix(a, name: str) -> np.ndarray:
    out = np.asarray(a, dtype=float)
    if out.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array, got shape {out.shape}")
    if not np.isfinite(out).all():
        raise ValueError(f"{name} contains non-finite entries")
    return out


@dataclass(frozen=True)
class RegressionData:
    """Fixed design and response matrices sharing n rows.

    Columns of X are expected to sit near the common norm sqrt(n) that the
    asymptotic theory assumes; inputs are never rescaled (rescaling would
    silently move the inferential targets), but a ``DesignScaleWarning`` is
    emitted when any column norm strays by more than 20 percent.
    """

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = _as_matrix(self.X, "X")
        Y = _as_matrix(self.Y, "Y")
        if X.shape[0] != Y.shape[0]:
            raise ValueError(
                f"X and Y must share their row count, got {X.shape[0]} and {Y.shape[0]}"
            )
        if X.shape[0] < 2:
            raise ValueError("need at least two observations")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        norms = np.linalg.norm(X, axis=0)
        root_n = np.sqrt(X.shape[0])
        off = np.abs(norms / root_n - 1.0) > 0.20
        if off.any():
            warnings.warn(
                f"{int(off.sum())} design column(s) deviate from the sqrt(n) "
                "normalization by more than 20%; estimates remain valid but "
                "the asymptotic approximations may degrade",
                DesignScaleWarning,
                stacklevel=3,
            )

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Y.shape[1]


@dataclass(frozen=True)
class GramMatrix:
    """Symmetric PSD matrix S = X'X / n."""

    matrix: np.ndarray

    def __post_init__(self):
        m = _as_matrix(self.matrix, "gram matrix")
        if m.shape[0] != m.shape[1]:
            raise ValueError("gram matrix must be square")
        scale = max(np.abs(m).max(), 1.0)
        if np.abs(m - m.T).max() > _SYM_TOL * scale:
            raise ValueError("gram matrix is not symmetric to working precision")
        w = np.linalg.eigvalsh(m)
        floor = -_PSD_TOL * max(np.trace(m) / m.shape[0], np.finfo(float).tiny)
        if w.min() < floor:
            raise ValueError(
                f"gram matrix is not positive semidefinite (min eigenvalue {w.min():.3e})"
            )
        object.__setattr__(self, "matrix", m)

    @property
    def p(self) -> int:
        return self.matrix.shape[0]


def gram(data: RegressionData) -> GramMatrix:
    """Gram matrix of the design, symmetrized to kill round-off asymmetry."""
    a = data.X.T @ data.X / data.n
    return GramMatrix((a + a.T) / 2.0)


@dataclass(frozen=True)
class SvdFit:
    """A rank-r SVD estimate: strictly decreasing d, unit-norm left vectors,
    orthonormal right vectors.

    Construction enforces the invariants; fits whose singular values tie to
    working precision are rejected outright since the layer order (and every
    per-layer quantity downstream) would be arbitrary.
    """

    d: np.ndarray
    L: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float).ravel()
        L = _as_matrix(self.L, "L")
        R = _as_matrix(self.R, "R")
        r = d.size
        if r < 1:
            raise ValueError("fit needs at least one layer")
        if L.shape[1] != r or R.shape[1] != r:
            raise ValueError("L and R must have one column per singular value")
        if not (d > 0).all():
            raise ValueError("singular values must be positive")
        if r > 1:
            gaps = d[:-1] - d[1:]
            if (gaps <= 0).any():
                raise ValueError("singular values must be strictly decreasing")
            if (gaps < _TIE_REL * d[0]).any():
                raise TiedSingularValues(
                    "consecutive singular values tie to working precision"
                )
        lnorm = np.linalg.norm(L, axis=0)
        if np.abs(lnorm - 1.0).max() > _ORTHO_TOL:
            raise ValueError("left vectors must have unit norm")
        rtr = R.T @ R
        if np.abs(rtr - np.eye(r)).max() > _ORTHO_TOL:
            raise ValueError("right vectors must be orthonormal")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "R", R)

    @property
    def rank(self) -> int:
        return self.d.size

    @property
    def mu(self) -> np.ndarray:
        """Scale-carrying left vectors, column i equal to d_i * l_i (p x r)."""
        return self.L * self.d

    def coefficient(self) -> np.ndarray:
        """The p x q coefficient matrix assembled from the layers."""
        return (self.L * self.d) @ self.R.T


@dataclass(frozen=True)
class ScaledFactors:
    """Latent factor columns u_i (n x r), v_i (q x r) and squared norms z."""

    U: np.ndarray
    V: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        U = _as_matrix(self.U, "U")
        V = _as_matrix(self.V, "V")
        z = np.asarray(self.z, dtype=float).ravel()
        r = z.size
        if U.shape[1] != r or V.shape[1] != r:
            raise ValueError("U, V, z disagree on the number of layers")
        utu = np.einsum("ij,ij->j", U, U)
        if np.abs(utu - 1.0).max() > _ORTHO_TOL:
            raise ValueError("columns of U must have unit norm")
        vtv = V.T @ V
        if np.abs(vtv - np.diag(z)).max() > _ORTHO_TOL * max(z.max(), 1.0):
            raise ValueError("columns of V must be orthogonal with squared norms z")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "z", z)

    @property
    def rank(self) -> int:
        return self.z.size


def scaled_factors(data: RegressionData, S: GramMatrix, fit: SvdFit) -> ScaledFactors:
    """Build the variance-adjusted factors of a fit on the given data.

    Raises
    ------
    DegenerateFactor
        If some l_i' S l_i is numerically zero, i.e. the design annihilates
        a fitted left vector and no scaling exists.
    """
    lsl = np.einsum("pi,pq,qi->i", fit.L, S.matrix, fit.L)
    if (lsl <= _DEGENERATE_TOL).any():
        bad = int(np.argmin(lsl))
        raise DegenerateFactor(
            f"design annihilates left vector {bad}: l'Sl = {lsl[bad]:.3e}"
        )
    root = np.sqrt(lsl)
    U = (data.X @ fit.L) / (np.sqrt(data.n) * root)
    V = fit.R * (fit.d * root)
    z = fit.d**2 * lsl
    return ScaledFactors(U=U, V=V, z=z)


def factor_gram(S: GramMatrix, L: np.ndarray) -> np.ndarray:
    """Cross-layer Gram block L' S L (r x r).

    Its off-diagonal magnitudes are the empirical strong-versus-weak
    orthogonality diagnostic: exactly zero means the latent factors are
    mutually orthogonal in the realized design metric.
    """
    L = _as_matrix(L, "L")
    return L.T @ S.matrix @ L


def load_matrix_csv(path) -> np.ndarray:
    """Read a headerless comma-separated matrix, one observation per row."""
    out = np.loadtxt(path, delimiter=",", ndmin=2, dtype=float)
    if not np.isfinite(out).all():
        raise ValueError(f"{path}: non-finite entries")
    return out
