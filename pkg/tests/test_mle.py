import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectral_mtp2 import mle as mle_mod
from spectral_mtp2.diagnostics import gaussian_kl, log_likelihood
from spectral_mtp2.errors import InfeasibleSupport, InputError, NoConvergence, NotPositiveDefinite
from spectral_mtp2.linalg import EdgeSet, extract_edges
from spectral_mtp2.mle import kkt_residual, mtp2_mle


def closed_form_2x2(S):
    """Unconstrained inverse when it is an M-matrix, otherwise the diagonal model."""
    if S[0, 1] > 0:
        return np.linalg.inv(S)
    return np.diag(1.0 / np.diag(S))


def sample_cov(rng, d, n):
    X = rng.standard_normal((n, d)) @ rng.standard_normal((d, d))
    X -= X.mean(axis=0)
    return X.T @ X / n


class TestExamples:
    def test_diagonal(self):
        K, rep = mtp2_mle(np.diag([2.0, 5.0]))
        assert np.allclose(K.matrix, np.diag([0.5, 0.2]), atol=1e-12)
        assert rep.max_residual <= 1e-7

    def test_inactive_constraint(self):
        K, _ = mtp2_mle(np.array([[1.0, 0.5], [0.5, 1.0]]))
        assert np.allclose(K.matrix, [[4 / 3, -2 / 3], [-2 / 3, 4 / 3]], atol=1e-8)

    def test_negative_correlation(self):
        S = np.array([[1.0, -0.3], [-0.3, 1.0]])
        K, rep = mtp2_mle(S)
        assert np.allclose(K.matrix, np.eye(2), atol=1e-12)
        assert rep.dual_certificate[0, 1] == pytest.approx(0.3)
        assert rep.dual_certificate[1, 0] == pytest.approx(0.3)

    @settings(max_examples=200, deadline=None)
    @given(
        a=st.floats(0.05, 20), b=st.floats(0.05, 20), r=st.floats(-0.98, 0.98)
    )
    def test_closed_form_2x2(self, a, b, r):
        S = np.array([[a, r * np.sqrt(a * b)], [r * np.sqrt(a * b), b]])
        K, _ = mtp2_mle(S)
        expected = closed_form_2x2(S)
        assert np.max(np.abs(K.matrix - expected)) <= 1e-8 * max(1.0, np.max(np.abs(expected)))


class TestKktResidual:
    def test_unconstrained_optimum(self):
        S = np.array([[2.0, 0.5, 0.2], [0.5, 1.0, 0.3], [0.2, 0.3, 1.5]])
        K = np.linalg.inv(S)
        assert np.all(K[~np.eye(3, dtype=bool)] < 0)
        rep = kkt_residual(K, S)
        assert rep.max_residual < 1e-10

    def test_negative_correlation_is_optimal(self):
        rep = kkt_residual(np.eye(2), np.array([[1.0, -0.3], [-0.3, 1.0]]))
        assert rep.edge_residual == 0 and rep.slack_residual == 0
        assert rep.dual_certificate[0, 1] == pytest.approx(0.3)

    def test_positive_correlation_flags_missing_edge(self):
        rep = kkt_residual(np.eye(2), np.array([[1.0, 0.3], [0.3, 1.0]]))
        assert rep.slack_residual == pytest.approx(0.3)

    def test_support_exempts_pairs(self):
        sup = EdgeSet.from_pairs(2, [])
        rep = kkt_residual(np.eye(2), np.array([[1.0, 0.3], [0.3, 1.0]]), sup)
        assert rep.max_residual == 0

    def test_not_pd(self):
        with pytest.raises(NotPositiveDefinite):
            kkt_residual(np.array([[1.0, 2.0], [2.0, 1.0]]), np.eye(2))


class TestSolver:
    def test_random_5x5_kkt(self, rng):
        for _ in range(10):
            S = sample_cov(rng, 5, 8)
            K, rep = mtp2_mle(S)
            assert rep.max_residual <= 1e-7
            off = K.matrix[~np.eye(5, dtype=bool)]
            assert np.all(off <= 1e-12)
            Sigma = np.linalg.inv(K.matrix)
            assert np.allclose(np.diag(Sigma), np.diag(S), atol=1e-7)
            Lam = rep.dual_certificate
            assert np.all(Lam[~np.eye(5, dtype=bool)] >= -1e-7)
            assert np.all(Lam[K.matrix < -1e-10] == 0)

    def test_monotone_ascent(self, rng):
        S = sample_cov(rng, 30, 40)
        _, rep = mtp2_mle(S)
        tr = np.array(rep.objective_trace)
        assert len(tr) >= 2
        assert np.all(np.diff(tr) >= -1e-12 * np.maximum(1.0, np.abs(tr[1:])))

    def test_monotone_ascent_without_newton(self, rng):
        S = sample_cov(rng, 12, 30)
        _, rep = mtp2_mle(S, newton=False, max_sweeps=5000)
        tr = np.array(rep.objective_trace)
        assert np.all(np.diff(tr) >= -1e-12 * np.maximum(1.0, np.abs(tr[1:])))

    def test_support_constraint(self, rng):
        S = sample_cov(rng, 8, 50)
        sup = EdgeSet.from_pairs(8, [(i, i + 1) for i in range(7)])
        K, rep = mtp2_mle(S, support=sup)
        mask = sup.mask() | np.eye(8, dtype=bool)
        assert np.all(K.matrix[~mask] == 0)
        assert rep.max_residual <= 1e-7
        E = extract_edges(K, 0.0)
        assert set(map(tuple, E.as_array().tolist())) <= set(map(tuple, sup.as_array().tolist()))

    def test_empty_support_is_diagonal(self, rng):
        S = sample_cov(rng, 6, 20)
        K, _ = mtp2_mle(S, support=EdgeSet.from_pairs(6, []))
        assert np.allclose(K.matrix, np.diag(1 / np.diag(S)))

    def test_variational_inequality(self, rng):
        d = 7
        S = sample_cov(rng, d, 15)
        K, _ = mtp2_mle(S)
        f = log_likelihood(K, S)
        for _ in range(30):
            P = rng.uniform(-0.3, 0.3, (d, d))
            P = (P + P.T) / 2
            Kp = K.matrix + P * np.abs(K.matrix).max() * 0.2
            off = ~np.eye(d, dtype=bool)
            Kp[off] = np.minimum(Kp[off], 0.0)
            Kp += np.eye(d) * max(0.0, 1e-3 - np.linalg.eigvalsh(Kp)[0])
            assert log_likelihood(K, S) - log_likelihood(Kp, S) >= 2 * gaussian_kl(K, Kp) - 1e-6
        assert np.isfinite(f)

    def test_variational_inequality_on_support(self, rng):
        d = 8
        S = sample_cov(rng, d, 40)
        pairs = [(i, i + 1) for i in range(d - 1)] + [(0, 4), (2, 6)]
        sup = EdgeSet.from_pairs(d, pairs)
        K, _ = mtp2_mle(S, support=sup)
        mask = sup.mask()
        for _ in range(30):
            Kp = K.matrix.copy()
            r = rng.uniform(0.5, 1.5, (d, d))
            r = (r + r.T) / 2
            Kp[mask] = np.minimum(Kp[mask] * r[mask] - 0.01 * rng.random(), 0.0)[...]
            Kp = (Kp + Kp.T) / 2
            Kp += np.eye(d) * max(0.0, 1e-3 - np.linalg.eigvalsh(Kp)[0])
            assert log_likelihood(K, S) - log_likelihood(Kp, S) >= 2 * gaussian_kl(K, Kp) - 1e-6

    def test_entrywise_agrees(self, rng):
        S = sample_cov(rng, 5, 12)
        K1, _ = mtp2_mle(S)
        K2, _ = mtp2_mle(S, method="entrywise", max_sweeps=20000)
        assert np.allclose(K1.matrix, K2.matrix, atol=1e-5)

    def test_warm_start(self, rng):
        S = sample_cov(rng, 10, 30)
        K1, _ = mtp2_mle(S)
        K2, rep = mtp2_mle(S, K0=K1.matrix)
        assert rep.sweeps <= 1
        assert np.allclose(K1.matrix, K2.matrix, atol=1e-6)

    def test_no_convergence(self, rng):
        S = sample_cov(rng, 20, 5)
        with pytest.raises(NoConvergence):
            mtp2_mle(S, max_sweeps=2)

    def test_singular_pair_does_not_converge(self):
        with pytest.raises(NoConvergence):
            mtp2_mle(np.ones((2, 2)), max_sweeps=50)

    def test_infeasible_support(self, monkeypatch, rng):
        def broken(*args):
            raise NotPositiveDefinite("forced")

        monkeypatch.setattr(mle_mod, "_column_sweep", broken)
        with pytest.raises(InfeasibleSupport):
            mtp2_mle(sample_cov(rng, 4, 10))

    @pytest.mark.parametrize(
        "S",
        [np.array([[0.0, 0.0], [0.0, 1.0]]), np.array([[1.0, 0.2], [0.3, 1.0]])],
    )
    def test_invalid_covariance(self, S):
        with pytest.raises(InputError):
            mtp2_mle(S)

    def test_invalid_start(self):
        with pytest.raises(InputError):
            mtp2_mle(np.eye(2), K0=np.array([[1.0, 0.5], [0.5, 1.0]]))
