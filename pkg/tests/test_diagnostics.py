import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectral_mtp2.diagnostics import (
    DiagnosticsBundle,
    bregman_gap,
    frobenius_bias_bound,
    gaussian_kl,
    log_likelihood,
    regime_check_training,
    residual_trace_norm,
)
from spectral_mtp2.errors import DimMismatch, NotOptimal, NotPositiveDefinite
from spectral_mtp2.mle import mtp2_mle

from conftest import random_spd


def kl_oracle(K1, K2):
    """Trace/log-det form of the Gaussian KL with an explicit inverse."""
    d = K1.shape[0]
    M = K2 @ np.linalg.inv(K1)
    sign, logdet = np.linalg.slogdet(M)
    assert sign > 0
    return 0.5 * (np.trace(M) - d - logdet)


def random_psd(rng, d, rank=None):
    X = rng.standard_normal((rank or d, d))
    return X.T @ X / (rank or d)


class TestLogLikelihood:
    def test_identity(self):
        assert log_likelihood(np.eye(4), np.eye(4)) == pytest.approx(-4.0)

    def test_scaled(self):
        assert log_likelihood(2 * np.eye(2), np.eye(2)) == pytest.approx(np.log(4) - 4, abs=1e-12)
        assert log_likelihood(2 * np.eye(2), np.eye(2)) == pytest.approx(-2.613706, abs=1e-6)

    def test_zero_trace(self):
        assert log_likelihood(np.eye(2), np.zeros((2, 2))) == 0.0

    def test_errors(self):
        with pytest.raises(NotPositiveDefinite):
            log_likelihood(-np.eye(2), np.eye(2))
        with pytest.raises(DimMismatch):
            log_likelihood(np.eye(2), np.eye(3))


class TestKL:
    def test_equal(self, rng):
        K = random_spd(rng, 5, 10.0)
        assert gaussian_kl(K, K) == pytest.approx(0.0, abs=1e-12)

    def test_scaled_identity(self):
        expected = 3 * (1.2 - 1 - np.log(1.2)) / 2
        assert gaussian_kl(np.eye(3), 1.2 * np.eye(3)) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.0265177, abs=1e-7)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 8))
    def test_against_trace_form(self, seed, d):
        rng = np.random.default_rng(seed)
        K1, K2 = random_spd(rng, d, 50.0), random_spd(rng, d, 50.0)
        assert gaussian_kl(K1, K2) == pytest.approx(kl_oracle(K1, K2), rel=1e-8, abs=1e-10)
        assert gaussian_kl(K1, K2) >= 0

    def test_direction(self):
        K1, K2 = np.eye(1), 2 * np.eye(1)
        assert gaussian_kl(K1, K2) == pytest.approx(0.5 * (2 - 1 - np.log(2)))
        assert gaussian_kl(K2, K1) == pytest.approx(0.5 * (0.5 - 1 - np.log(0.5)))


class TestResidualTraceNorm:
    def test_zero_residual(self, rng):
        K = random_spd(rng, 5, 5.0)
        assert residual_trace_norm(K, np.linalg.inv(K)) == pytest.approx(0.0, abs=1e-10)

    def test_diagonal(self):
        assert residual_trace_norm(np.eye(2), np.diag([2.0, 0.5])) == pytest.approx(1.5)

    @pytest.mark.parametrize("c", [0.0, 0.3, 1.0, 2.5])
    def test_scaled_identity(self, c):
        assert residual_trace_norm(np.eye(4), c * np.eye(4)) == pytest.approx(4 * abs(c - 1))

    def test_against_oracle(self, rng):
        import scipy.linalg

        K = random_spd(rng, 6, 20.0)
        T = random_psd(rng, 6, rank=3)
        H = scipy.linalg.sqrtm(K).real
        sv = np.linalg.svd(H @ (T - np.linalg.inv(K)) @ H, compute_uv=False)
        assert residual_trace_norm(K, T) == pytest.approx(sv.sum(), rel=1e-8)


class TestBregman:
    def test_equal(self, rng):
        K = random_spd(rng, 4, 3.0)
        gap, kl, tr = bregman_gap(K, K, random_psd(rng, 4))
        assert gap == pytest.approx(0, abs=1e-12)
        assert kl == pytest.approx(0, abs=1e-12)
        assert tr == pytest.approx(0, abs=1e-12)

    def test_model_covariance(self, rng):
        K1, K2 = random_spd(rng, 5, 5.0), random_spd(rng, 5, 5.0)
        gap, kl, tr = bregman_gap(K1, K2, np.linalg.inv(K1))
        assert tr == pytest.approx(0, abs=1e-10)
        assert gap == pytest.approx(-2 * kl, rel=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_identity(self, seed):
        rng = np.random.default_rng(seed)
        K1, K2 = random_spd(rng, 5, 20.0), random_spd(rng, 5, 20.0)
        T = random_psd(rng, 5, rank=int(rng.integers(1, 6)))
        gap, kl, tr = bregman_gap(K1, K2, T)
        assert abs(gap + 2 * kl + tr) < 1e-8 * max(1.0, abs(gap))


class TestFrobenius:
    def test_equal(self, rng):
        K = random_spd(rng, 4, 3.0)
        bound, actual = frobenius_bias_bound(K, K, 0.3)
        assert actual == 0 and bound > 0

    def test_equality_case(self):
        d, eps = 9, 0.4
        bound, actual = frobenius_bias_bound(np.eye(d), (1 + eps) * np.eye(d), eps)
        assert actual == pytest.approx(eps * 3)
        assert bound == pytest.approx(eps * 3)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), eps=st.floats(0.01, 0.99))
    def test_sandwich_implies_bound(self, seed, eps):
        # any K2 with (1-eps) K1 <= K2 <= (1+eps) K1
        rng = np.random.default_rng(seed)
        d = 6
        K1 = random_spd(rng, d, 10.0)
        w, U = np.linalg.eigh(K1)
        H = (U * np.sqrt(w)) @ U.T
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        M = (Q * rng.uniform(1 - eps, 1 + eps, d)) @ Q.T
        K2 = H @ M @ H
        bound, actual = frobenius_bias_bound(K1, K2, eps)
        assert actual <= bound + 1e-8


class TestBundle:
    def test_close_pair(self, rng):
        d, eps = 6, 0.2
        K1 = random_spd(rng, d, 5.0)
        K2 = 1.1 * K1
        T = random_psd(rng, d)
        b = DiagnosticsBundle(K1, K2, eps, T)
        assert b.certified
        assert b.kl_within_bound is True
        assert b.window_holds is True
        assert b.bregman_residual < 1e-8
        assert b.kl_bound == pytest.approx(d * eps**2 / 2)
        lo, hi = b.bound_window
        assert lo == pytest.approx(-d * eps**2 - eps * b.residual_R)
        assert hi == pytest.approx(eps * b.residual_R)
        assert b.out_of_sample_gain == (b.loglik_gap > 0)

    def test_uncertified(self, rng):
        K = random_spd(rng, 3, 2.0)
        b = DiagnosticsBundle(K, 1.5 * K, 0.94)
        assert not b.certified
        assert b.kl_within_bound is None and b.window_holds is None
        assert b.loglik_gap is None and b.residual_R is None
        d = b.to_dict()
        assert d["certified"] is False and d["bound_window"] is None


class TestTrainingRegime:
    def setup_method(self):
        rng = np.random.default_rng(7)
        X = rng.standard_normal((30, 6)) @ rng.standard_normal((6, 6))
        X -= X.mean(0)
        self.S = X.T @ X / 30
        self.K, _ = mtp2_mle(self.S)

    def test_equality(self):
        rep = regime_check_training(self.K, self.K, self.S)
        assert rep.loglik_gap == pytest.approx(0, abs=1e-12)
        assert rep.holds

    def test_sparsified(self):
        from spectral_mtp2.pipeline import spectral_mtp2

        res = spectral_mtp2(self.K, 1.5)
        rep = regime_check_training(self.K, res.K_tilde, self.S)
        assert rep.holds
        assert rep.lambda_term <= 1e-8
        assert rep.loglik_gap == pytest.approx(-2 * rep.kl_cost + rep.lambda_term, abs=1e-8)

    def test_diagonal(self):
        S = np.array([[1.0, -0.2, 0.0], [-0.2, 2.0, -0.1], [0.0, -0.1, 1.0]])
        K, _ = mtp2_mle(S)
        assert np.count_nonzero(K.matrix - np.diag(np.diag(K.matrix))) == 0
        rep = regime_check_training(K, K, S)
        assert rep.holds and rep.loglik_gap == 0

    def test_not_optimal(self):
        with pytest.raises(NotOptimal):
            regime_check_training(np.eye(6), np.eye(6), self.S)
