"""Right-debias machinery: aux identities, one-step estimates, variances."""

import math
import warnings

import numpy as np
import pytest

from svdinfer.errors import DegenerateFactor, DesignScaleWarning, NotPositive, SingularA
from svdinfer.leftdebias import LeftDebiasResult, left_aux_matrices
from svdinfer.linmodel import (
    GramMatrix,
    RegressionData,
    ScaledFactors,
    SvdFit,
    gram,
    scaled_factors,
)
from svdinfer.rightdebias import (
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
from svdinfer.simlab import ar_cov


def design(rng, n, p):
    X = rng.standard_normal((n, p))
    return X * (math.sqrt(n) / np.linalg.norm(X, axis=0))


def unit_columns(rng, m, r):
    A = rng.standard_normal((m, r))
    return A / np.linalg.norm(A, axis=0)


def truth_fit(rng, p, q, r, d=None):
    d = np.asarray(d if d is not None else np.linspace(5.0, 2.0, r), dtype=float)
    L = np.linalg.qr(rng.standard_normal((p, r)))[0]
    R = np.linalg.qr(rng.standard_normal((q, r)))[0]
    return SvdFit(d=d, L=L, R=R)


def rand_factors(rng, n, q, r):
    """Valid scaled factors: unit-norm correlated U, orthogonal V columns.

    The squared norms are kept well separated so the strong core stays far
    from singular.
    """
    U = unit_columns(rng, n, r)
    z = np.geomspace(6.0, 0.8, r) * rng.uniform(0.8, 1.2)
    V = np.linalg.qr(rng.standard_normal((q, r)))[0] * np.sqrt(z)
    return ScaledFactors(U=U, V=V, z=z)


def dense_target(factors, M, k):
    """The matrix both W constructions must invert, assembled directly."""
    q = factors.V.shape[0]
    others = [i for i in range(factors.rank) if i != k]
    T = np.eye(q) - np.outer(M @ factors.U[:, k], factors.V[:, k])
    if others:
        T += M @ (factors.U[:, others] @ factors.V[:, others].T)
    return T


def identity_gap(factors, aux, k):
    T = dense_target(factors, aux.M, k)
    return np.abs(aux.W @ T - np.eye(T.shape[0])).max()


def truth_left_results(fit, S, theta):
    """Truth-plugged left bundles: exact mu, true supports, aux at the fit."""
    out = []
    for i in range(fit.rank):
        M_u, W_u = left_aux_matrices(i, fit, S, theta)
        mu = fit.mu[:, i]
        out.append(
            LeftDebiasResult(
                k=i,
                mu_hat=mu,
                support=np.flatnonzero(mu),
                mu_hat_t=mu,
                u_hat_t=np.zeros(2),  # unused by the variance assembly
                M_u=M_u,
                W_u=W_u,
            )
        )
    return out


class TestStrongAux:
    def test_single_layer_collapse(self):
        rng = np.random.default_rng(0)
        factors = rand_factors(rng, n=10, q=4, r=1)
        aux = strong_aux(0, factors)
        assert aux.M.shape == (4, 10)
        assert not aux.M.any()
        assert aux.A.shape == (0, 0)
        assert np.array_equal(aux.W, np.eye(4))

    def test_toy_matches_dense_inverse(self):
        rng = np.random.default_rng(1)
        factors = rand_factors(rng, n=4, q=3, r=2)
        for k in range(2):
            aux = strong_aux(k, factors)
            T = dense_target(factors, aux.M, k)
            np.testing.assert_allclose(aux.W, np.linalg.inv(T), rtol=1e-10, atol=1e-12)
            assert identity_gap(factors, aux, k) < 1e-12

    def test_identity_on_random_factor_sets(self):
        rng = np.random.default_rng(2)
        for _ in range(60):
            r = int(rng.integers(1, 5))
            n = int(rng.integers(max(r + 1, 8), 25))
            q = int(rng.integers(max(r, 2), 8))
            factors = rand_factors(rng, n=n, q=q, r=r)
            for k in range(r):
                assert identity_gap(factors, strong_aux(k, factors), k) < 1e-8

    def test_singular_core_raises(self):
        # Dyadic factors with equal squared norms make the 1x1 core
        # vv_k - z_i (u_i'u_i) exactly zero.
        U = np.zeros((8, 2))
        U[:4, 0] = 0.5
        U[4:, 1] = 0.5
        V = np.zeros((5, 2))
        V[0, 0] = V[1, 0] = 1.0
        V[0, 1], V[1, 1] = 1.0, -1.0
        factors = ScaledFactors(U=U, V=V, z=np.array([2.0, 2.0]))
        with pytest.raises(SingularA):
            strong_aux(0, factors)

    def test_degenerate_layer_raises(self):
        rng = np.random.default_rng(4)
        U = unit_columns(rng, 8, 2)
        V = np.zeros((5, 2))
        V[0, 0] = 1.0
        V[1, 1] = 1e-7
        factors = ScaledFactors(U=U, V=V, z=np.array([1.0, 1e-14]))
        with pytest.raises(DegenerateFactor):
            strong_aux(1, factors)

    def test_identity_survives_layer_rescaling(self):
        rng = np.random.default_rng(5)
        factors = rand_factors(rng, n=12, q=5, r=3)
        c = 2.5
        V = factors.V.copy()
        z = factors.z.copy()
        V[:, 1] *= c
        z[1] *= c * c
        rescaled = ScaledFactors(U=factors.U, V=V, z=z)
        for k in range(3):
            assert identity_gap(rescaled, strong_aux(k, rescaled), k) < 1e-8


class TestStrongDebias:
    def test_single_layer_bit_tight_collapse(self):
        # All values dyadic, so v - (v (u'u) - Y'u/sqrt(n)) must equal
        # Y'u/sqrt(n) bit for bit when W = I and M = 0.
        X = 2.0 * np.eye(4)
        Y = np.array(
            [[1.0, -2.0, 4.0], [3.0, 5.0, -1.0], [-7.0, 2.0, 6.0], [2.0, -3.0, 8.0]]
        )
        data = RegressionData(X=X, Y=Y)
        u = np.full(4, 0.5)
        v = np.array([1.0, 2.0, 4.0])
        factors = ScaledFactors(U=u[:, None], V=v[:, None], z=np.array([21.0]))
        aux = strong_aux(0, factors)
        v_hat = strong_debias(0, data, factors, aux)
        assert np.array_equal(v_hat, Y.T @ u / 2.0)

    def test_noiseless_fixed_point_orthogonal_design(self):
        # The strong score vanishes at the truth when the latent factors are
        # exactly orthogonal in the design metric; an orthonormal design with
        # orthonormal left vectors delivers that.
        rng = np.random.default_rng(6)
        n, p, q, r = 30, 5, 6, 3
        Q = np.linalg.qr(rng.standard_normal((n, p)))[0]
        X = math.sqrt(n) * Q
        fit = truth_fit(rng, p, q, r)
        data = RegressionData(X=X, Y=X @ fit.coefficient())
        S = gram(data)
        factors = scaled_factors(data, S, fit)
        for k in range(r):
            aux = strong_aux(k, factors)
            v_hat = strong_debias(k, data, factors, aux)
            np.testing.assert_allclose(v_hat, factors.V[:, k], atol=1e-10)


class TestStrongVariance:
    def test_single_layer_identity_noise(self):
        rng = np.random.default_rng(7)
        factors = rand_factors(rng, n=10, q=4, r=1)
        aux = strong_aux(0, factors)
        for j in range(4):
            assert strong_variance(0, j, factors, aux, np.eye(4)) == 1.0
        np.testing.assert_array_equal(
            strong_variance_profile(0, factors, aux, np.eye(4)), np.ones(4)
        )

    def test_single_layer_diagonal_noise(self):
        rng = np.random.default_rng(8)
        factors = rand_factors(rng, n=10, q=3, r=1)
        aux = strong_aux(0, factors)
        sig = np.diag([0.5, 2.0, 3.5])
        for j, s in enumerate([0.5, 2.0, 3.5]):
            assert strong_variance(0, j, factors, aux, sig) == pytest.approx(s, rel=1e-14)

    def test_profile_matches_scalar(self):
        rng = np.random.default_rng(9)
        factors = rand_factors(rng, n=15, q=6, r=3)
        sigma_e = ar_cov(0.4, 6)
        for k in range(3):
            aux = strong_aux(k, factors)
            profile = strong_variance_profile(k, factors, aux, sigma_e)
            for j in range(6):
                assert profile[j] == pytest.approx(
                    strong_variance(k, j, factors, aux, sigma_e), rel=1e-12
                )

    def test_matches_monte_carlo(self):
        # Truth-plugged two-layer toy: the plug-in formula must match the
        # sample variance of the linear form a'W(E'u - MEv) over noise draws.
        rng = np.random.default_rng(10)
        n, q = 12, 3
        factors = rand_factors(rng, n=n, q=q, r=2)
        sigma_e = ar_cov(0.3, q)
        chol = np.linalg.cholesky(sigma_e)
        draws = 20000
        for k in range(2):
            aux = strong_aux(k, factors)
            u, v = factors.U[:, k], factors.V[:, k]
            E = rng.standard_normal((draws, n, q)) @ chol.T
            Etu = np.einsum("bnq,n->bq", E, u)
            MEv = np.einsum("bnq,q->bn", E, v) @ aux.M.T
            H = (Etu - MEv) @ aux.W.T
            np.testing.assert_allclose(
                H.var(axis=0, ddof=1),
                strong_variance_profile(k, factors, aux, sigma_e),
                rtol=0.1,
            )

    def test_non_positive_raises(self):
        rng = np.random.default_rng(11)
        factors = rand_factors(rng, n=10, q=3, r=1)
        aux = strong_aux(0, factors)
        with pytest.raises(NotPositive):
            strong_variance(0, 0, factors, aux, np.zeros((3, 3)))


class TestWeakAux:
    def test_single_layer_projector_identity(self):
        # With an exactly unit u the algebra (I - P/2)(I + P) = I is exact up
        # to a couple of rounding steps.
        rng = np.random.default_rng(12)
        u = np.full(4, 0.5)
        v = np.array([1.0, 2.0, -1.0])
        factors = ScaledFactors(U=u[:, None], V=v[:, None], z=np.array([6.0]))
        aux = weak_aux(0, factors)
        vv = float(v @ v)
        np.testing.assert_allclose(
            aux.W, np.eye(3) - 0.5 * np.outer(v, v) / vv, rtol=1e-15
        )
        lhs = aux.W @ (np.eye(3) + np.outer(v, v) / vv)
        np.testing.assert_allclose(lhs, np.eye(3), atol=1e-15)

    def test_orthogonal_factors_collapse(self):
        # u_k orthogonal to the other latent factors removes the cross block.
        rng = np.random.default_rng(13)
        n, q, r = 12, 5, 3
        U = np.linalg.qr(rng.standard_normal((n, r)))[0]
        z = np.array([4.0, 2.0, 1.0])
        V = np.linalg.qr(rng.standard_normal((q, r)))[0] * np.sqrt(z)
        factors = ScaledFactors(U=U, V=V, z=z)
        for k in range(r):
            aux = weak_aux(k, factors)
            v = factors.V[:, k]
            np.testing.assert_allclose(
                aux.W, np.eye(q) - 0.5 * np.outer(v, v) / float(v @ v), atol=1e-14
            )

    def test_identity_on_random_factor_sets(self):
        rng = np.random.default_rng(14)
        for _ in range(60):
            r = int(rng.integers(1, 5))
            n = int(rng.integers(max(r + 1, 8), 25))
            q = int(rng.integers(max(r, 2), 8))
            factors = rand_factors(rng, n=n, q=q, r=r)
            for k in range(r):
                assert identity_gap(factors, weak_aux(k, factors), k) < 1e-8

    def test_degenerate_layer_raises(self):
        rng = np.random.default_rng(15)
        U = unit_columns(rng, 8, 2)
        V = np.zeros((4, 2))
        V[0, 0] = 1.0
        V[1, 1] = 1e-7
        factors = ScaledFactors(U=U, V=V, z=np.array([1.0, 1e-14]))
        with pytest.raises(DegenerateFactor):
            weak_aux(1, factors)

    def test_identity_survives_layer_rescaling(self):
        rng = np.random.default_rng(16)
        factors = rand_factors(rng, n=12, q=5, r=3)
        c = 3.0
        V = factors.V.copy()
        z = factors.z.copy()
        V[:, 0] *= c
        z[0] *= c * c
        rescaled = ScaledFactors(U=factors.U, V=V, z=z)
        for k in range(3):
            assert identity_gap(rescaled, weak_aux(k, rescaled), k) < 1e-8


class TestWeakDebias:
    def test_single_layer_direct_evaluation(self):
        rng = np.random.default_rng(17)
        n, q = 8, 3
        X = design(rng, n, 2)
        Y = rng.standard_normal((n, q))
        data = RegressionData(X=X, Y=Y)
        u = unit_columns(rng, n, 1)[:, 0]
        v = np.array([1.5, -0.5, 2.0])
        vv = float(v @ v)
        factors = ScaledFactors(U=u[:, None], V=v[:, None], z=np.array([vv]))
        aux = weak_aux(0, factors)
        v_hat = weak_debias(0, data, factors, u[:, None], aux)
        # Independent transcription of the collapsed formula.
        W_ref = np.eye(q) - 0.5 * np.outer(v, v) / vv
        M_ref = -np.outer(v, u) / vv
        g_v = v * float(u @ u) - Y.T @ u / math.sqrt(n)
        g_u = u * vv - Y @ v / math.sqrt(n)
        ref = v - W_ref @ (g_v - M_ref @ g_u)
        np.testing.assert_allclose(v_hat, ref, rtol=1e-14)

    def test_noiseless_fixed_point_correlated_factors(self):
        # Unlike the strong mode, the weak score vanishes at the truth even
        # when the latent factors are correlated, provided the subtracted
        # factors are the true ones.
        rng = np.random.default_rng(18)
        n, p, q, r = 40, 6, 5, 3
        X = design(rng, n, p)
        fit = truth_fit(rng, p, q, r)
        data = RegressionData(X=X, Y=X @ fit.coefficient())
        S = gram(data)
        factors = scaled_factors(data, S, fit)
        cross = np.abs(factors.U.T @ factors.U - np.eye(r)).max()
        assert cross > 1e-3  # genuinely correlated case
        for k in range(r):
            aux = weak_aux(k, factors)
            v_hat = weak_debias(k, data, factors, factors.U, aux)
            np.testing.assert_allclose(v_hat, factors.V[:, k], atol=1e-10)

    def test_rejects_bad_factor_stack(self):
        rng = np.random.default_rng(19)
        n, p, q, r = 20, 4, 3, 2
        X = design(rng, n, p)
        fit = truth_fit(rng, p, q, r)
        data = RegressionData(X=X, Y=X @ fit.coefficient())
        S = gram(data)
        factors = scaled_factors(data, S, fit)
        aux = weak_aux(0, factors)
        with pytest.raises(ValueError):
            weak_debias(0, data, factors, factors.U[:, :1], aux)


class TestOmega:
    def test_same_layer_rejected(self):
        rng = np.random.default_rng(20)
        factors = rand_factors(rng, n=10, q=4, r=2)
        aux = weak_aux(0, factors)
        with pytest.raises(ValueError):
            omega(0, 0, factors, aux, np.eye(4)[:, :2], 0)

    def test_direct_evaluation(self):
        rng = np.random.default_rng(21)
        factors = rand_factors(rng, n=10, q=5, r=3)
        R = np.linalg.qr(rng.standard_normal((5, 3)))[0]
        aux = weak_aux(1, factors)
        for i in (0, 2):
            for j in range(5):
                ref = float(aux.W[j] @ R[:, i]) / math.sqrt(factors.z[1])
                assert omega(1, i, factors, aux, R, j) == pytest.approx(ref, rel=1e-15)

    def test_orthogonal_direction_vanishes(self):
        rng = np.random.default_rng(22)
        factors = rand_factors(rng, n=10, q=5, r=2)
        aux = weak_aux(0, factors)
        j = 2
        w_row = aux.W[j]
        col = rng.standard_normal(5)
        col -= w_row * (col @ w_row) / (w_row @ w_row)
        R = np.column_stack([np.eye(5)[:, 0], col / np.linalg.norm(col)])
        assert abs(omega(0, 1, factors, aux, R, j)) < 1e-12


class WeakVarianceCase:
    """Shared truth-plugged construction: sparse left blocks, dense rights."""

    def __init__(self, seed=23, n=40, p=6, q=5, d=(4.0, 2.0), rho=0.3):
        rng = np.random.default_rng(seed)
        r = len(d)
        L = np.zeros((p, r))
        L[0:2, 0] = unit_columns(rng, 2, 1)[:, 0]
        L[2:4, 1] = unit_columns(rng, 2, 1)[:, 0]
        R = np.linalg.qr(rng.standard_normal((q, r)))[0]
        self.fit = SvdFit(d=np.asarray(d, dtype=float), L=L, R=R)
        self.X = design(rng, n, p)
        data = RegressionData(X=self.X, Y=self.X @ self.fit.coefficient())
        self.data = data
        self.S = gram(data)
        self.factors = scaled_factors(data, self.S, self.fit)
        self.sigma_e = ar_cov(rho, q)
        self.theta = np.linalg.inv(self.S.matrix)
        self.left = truth_left_results(self.fit, self.S, self.theta)
        self.rng = rng

    def simulate_h(self, k, draws, chunk=5000):
        """Sample the distribution term h_vk - sum_i omega_ki h_ui directly."""
        fit, S, factors = self.fit, self.S, self.factors
        n = self.X.shape[0]
        q = fit.R.shape[0]
        Sm = S.matrix
        L, R, d, mu = fit.L, fit.R, fit.d, fit.mu
        aux = weak_aux(k, factors)
        lsl = float(L[:, k] @ Sm @ L[:, k])
        root_lsl = math.sqrt(lsl)
        M_v = -np.outer(R[:, k], L[:, k]) / (d[k] * lsl)
        s1 = d[k] * root_lsl * R[:, k]
        s2 = L[:, k] / root_lsl
        others = [i for i in range(fit.rank) if i != k]
        Omega = (aux.W @ R[:, others]) / math.sqrt(float(factors.z[k]))
        smu_k = Sm @ mu[:, k]
        bs, ms, rs, mus = [], [], [], []
        for i in others:
            res = self.left[i]
            a_i = np.zeros(Sm.shape[0])
            a_i[res.support] = smu_k[res.support]
            b_i = res.W_u.T @ a_i
            bs.append(b_i)
            ms.append(res.M_u.T @ b_i)
            rs.append(R[:, i])
            mus.append(mu[:, i])
        chol = np.linalg.cholesky(self.sigma_e)
        out = np.empty((draws, q))
        done = 0
        while done < draws:
            b = min(chunk, draws - done)
            E = self.rng.standard_normal((b, n, q)) @ chol.T
            G = np.einsum("np,bnq->bpq", self.X, E)
            vec = np.einsum("qp,bp->bq", M_v, np.einsum("bpq,q->bp", G, s1))
            vec -= np.einsum("bpq,p->bq", G, s2)
            h_v = vec @ aux.W.T / math.sqrt(n)
            h_tot = h_v
            for idx in range(len(others)):
                h_u = (
                    np.einsum("bpq,q,p->b", G, rs[idx], bs[idx])
                    - np.einsum("bpq,p,q->b", G, mus[idx], ms[idx])
                ) / math.sqrt(n)
                h_tot = h_tot - np.outer(h_u, Omega[:, idx])
            out[done : done + b] = h_tot
            done += b
        return out


class TestWeakVariance:
    def test_single_layer_reduces_to_own_covariance(self):
        # r = 1: no cross terms, and the own-layer sandwich collapses
        # algebraically to W(Se + (r'Se r) rr' + 2 rr'Se)W'.
        rng = np.random.default_rng(24)
        n, p, q = 30, 4, 4
        X = design(rng, n, p)
        fit = truth_fit(rng, p, q, r=1, d=(3.0,))
        data = RegressionData(X=X, Y=X @ fit.coefficient())
        S = gram(data)
        factors = scaled_factors(data, S, fit)
        sigma_e = ar_cov(0.5, q)
        theta = np.linalg.inv(S.matrix)
        left = truth_left_results(fit, S, theta)
        aux = weak_aux(0, factors)
        r_vec = fit.R[:, 0]
        mid = (
            sigma_e
            + float(r_vec @ sigma_e @ r_vec) * np.outer(r_vec, r_vec)
            + 2.0 * np.outer(r_vec, sigma_e @ r_vec)
        )
        ref = np.einsum("jq,qt,jt->j", aux.W, mid, aux.W)
        profile = weak_variance_profile(0, fit, factors, sigma_e, left, S)
        np.testing.assert_allclose(profile, ref, rtol=1e-10)
        for j in range(q):
            assert weak_variance(0, j, fit, factors, sigma_e, left, S) == pytest.approx(
                ref[j], rel=1e-10
            )

    def test_profile_matches_scalar(self):
        rng = np.random.default_rng(25)
        n, p, q, r = 30, 6, 5, 3
        X = design(rng, n, p)
        fit = truth_fit(rng, p, q, r)
        data = RegressionData(X=X, Y=X @ fit.coefficient())
        S = gram(data)
        factors = scaled_factors(data, S, fit)
        sigma_e = ar_cov(0.4, q)
        left = truth_left_results(fit, S, np.linalg.inv(S.matrix))
        for k in range(r):
            profile = weak_variance_profile(k, fit, factors, sigma_e, left, S)
            for j in range(q):
                assert profile[j] == pytest.approx(
                    weak_variance(k, j, fit, factors, sigma_e, left, S), rel=1e-12
                )

    def test_empty_support_zeroes_cross_terms(self):
        case = WeakVarianceCase(seed=26)
        fit, factors, S, sigma_e = case.fit, case.factors, case.S, case.sigma_e
        gutted = []
        for res in case.left:
            gutted.append(
                LeftDebiasResult(
                    k=res.k,
                    mu_hat=res.mu_hat,
                    support=np.array([], dtype=int),
                    mu_hat_t=np.zeros_like(res.mu_hat_t),
                    u_hat_t=res.u_hat_t,
                    M_u=res.M_u,
                    W_u=res.W_u,
                )
            )
        aux = weak_aux(0, factors)
        r_vec = fit.R[:, 0]
        mid = (
            sigma_e
            + float(r_vec @ sigma_e @ r_vec) * np.outer(r_vec, r_vec)
            + 2.0 * np.outer(r_vec, sigma_e @ r_vec)
        )
        own_only = np.einsum("jq,qt,jt->j", aux.W, mid, aux.W)
        np.testing.assert_allclose(
            weak_variance_profile(0, fit, factors, sigma_e, gutted, S),
            own_only,
            rtol=1e-10,
        )

    def test_matches_monte_carlo(self):
        # Scaled-down version of the acceptance oracle: the plug-in value
        # must track the sample variance of the simulated distribution term.
        case = WeakVarianceCase(seed=27)
        for k in range(2):
            profile = weak_variance_profile(
                k, case.fit, case.factors, case.sigma_e, case.left, case.S
            )
            draws = case.simulate_h(k, draws=20000)
            np.testing.assert_allclose(draws.var(axis=0, ddof=1), profile, rtol=0.1)

    def test_non_positive_raises(self):
        case = WeakVarianceCase(seed=28)
        with pytest.raises(NotPositive):
            weak_variance(
                0, 0, case.fit, case.factors, np.zeros((5, 5)), case.left, case.S
            )


class TestResultContainer:
    def test_mode_whitelist(self):
        with pytest.raises(ValueError):
            RightDebiasResult(k=0, mode="fast", v_hat=np.ones(2), variances=np.ones(2))

    def test_non_positive_variance_flagged(self):
        with pytest.raises(NotPositive):
            RightDebiasResult(
                k=0, mode="weak", v_hat=np.ones(3), variances=np.array([1.0, 0.0, 2.0])
            )

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            RightDebiasResult(
                k=0, mode="strong", v_hat=np.ones(3), variances=np.ones(2)
            )

    def test_holds_diagnostics(self):
        res = RightDebiasResult(
            k=1,
            mode="weak",
            v_hat=np.ones(2),
            variances=np.ones(2),
            diagnostics={"core_condition": 3.5},
        )
        assert res.diagnostics["core_condition"] == 3.5
