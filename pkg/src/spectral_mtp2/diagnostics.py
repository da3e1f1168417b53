"""Likelihood, KL and bound diagnostics for a sparsified precision matrix.

``l(K; T) = log det K - tr(K T)`` is the Gaussian log-likelihood per
observation up to constants and a factor ``n/2``. All quantities are in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg

from .errors import NotOptimal
from .linalg import _check_same_dim, as_array, as_symmetric, cholesky

KL_BOUND_MAX_EPS = 0.5


def _pd(K, name):
    A = as_symmetric(as_array(K), name)
    return A, cholesky(A)


def log_likelihood(K, T) -> float:
    """``log det K - tr(K T)``."""
    K, R = _pd(K, "K")
    T = as_symmetric(as_array(T), "T")
    _check_same_dim(K, T)
    return float(2.0 * np.sum(np.log(np.diag(R))) - np.sum(K * T))


def _relative_spectrum(K1, K2) -> np.ndarray:
    """Eigenvalues of ``K1^{-1/2} K2 K1^{-1/2}``."""
    K1, R1 = _pd(K1, "K1")
    K2, _ = _pd(K2, "K2")
    _check_same_dim(K1, K2)
    X = scipy.linalg.solve_triangular(R1, K2, lower=True)
    X = scipy.linalg.solve_triangular(R1, X.T, lower=True)
    return np.linalg.eigvalsh(0.5 * (X + X.T))


def gaussian_kl(K1, K2) -> float:
    """``KL(N(0, K1^{-1}) || N(0, K2^{-1}))``.

    Evaluated as ``sum(mu - 1 - log mu) / 2`` over the spectrum of
    ``K1^{-1/2} K2 K1^{-1/2}``, which is nonnegative term by term.
    """
    mu = _relative_spectrum(K1, K2)
    return float(0.5 * np.sum(mu - 1.0 - np.log(mu)))


def _sqrtm_pd(K: np.ndarray) -> np.ndarray:
    lam, U = np.linalg.eigh(K)
    return (U * np.sqrt(lam)) @ U.T


def residual_trace_norm(K_hat, T) -> float:
    """Trace norm of ``K^{1/2} (T - K^{-1}) K^{1/2} = K^{1/2} T K^{1/2} - I``."""
    K, _ = _pd(K_hat, "K_hat")
    T = as_symmetric(as_array(T), "T")
    _check_same_dim(K, T)
    H = _sqrtm_pd(K)
    M = H @ T @ H
    M = 0.5 * (M + M.T) - np.eye(K.shape[0])
    return float(np.sum(np.abs(np.linalg.eigvalsh(M))))


def bregman_gap(K_hat, K_tilde, T) -> tuple[float, float, float]:
    """Log-likelihood gap and its KL and alignment parts.

    Returns ``(gap, kl, trace)`` with ``gap = l(K_tilde; T) - l(K_hat; T)``
    from direct evaluation, ``kl = gaussian_kl(K_hat, K_tilde)`` and
    ``trace = tr((K_tilde - K_hat)(T - K_hat^{-1}))``. Exactly,
    ``gap = -2 kl - trace``.
    """
    K1, R1 = _pd(K_hat, "K_hat")
    K2 = as_array(K_tilde)
    T = as_symmetric(as_array(T), "T")
    gap = log_likelihood(K2, T) - log_likelihood(K1, T)
    kl = gaussian_kl(K1, K2)
    Sigma = scipy.linalg.cho_solve((R1, True), np.eye(K1.shape[0]))
    trace = float(np.sum((K2 - K1) * (T - Sigma)))
    return gap, kl, trace


def frobenius_bias_bound(K_hat, K_tilde, eps: float) -> tuple[float, float]:
    """``(eps * sqrt(d) * ||K_hat||_2, ||K_tilde - K_hat||_F)``."""
    K1 = as_array(K_hat)
    K2 = as_array(K_tilde)
    _check_same_dim(K1, K2)
    d = K1.shape[0]
    norm2 = float(np.max(np.abs(np.linalg.eigvalsh(K1))))
    return float(eps * math.sqrt(d) * norm2), float(np.linalg.norm(K2 - K1))


@dataclass(frozen=True, eq=False)
class DiagnosticsBundle:
    """Diagnostics of `K_tilde` against `K_hat`, evaluated lazily.

    `T` is the covariance at which likelihood quantities are evaluated
    (for example a held-out sample covariance); likelihood fields are None
    without it. Guarantees that need ``eps <= 1/2`` are only flagged as
    holding when `certified` is True.
    """

    K_hat: np.ndarray
    K_tilde: np.ndarray
    epsilon: float
    T: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.K_hat.shape[0]

    @property
    def certified(self) -> bool:
        return bool(self.epsilon <= KL_BOUND_MAX_EPS)

    @cached_property
    def kl_nats(self) -> float:
        return gaussian_kl(self.K_hat, self.K_tilde)

    @property
    def kl_bound(self) -> float:
        return self.dim * self.epsilon**2 / 2.0

    @cached_property
    def _bregman(self):
        if self.T is None:
            return None
        return bregman_gap(self.K_hat, self.K_tilde, self.T)

    @property
    def loglik_gap(self) -> float | None:
        return None if self._bregman is None else self._bregman[0]

    @property
    def bregman_trace_term(self) -> float | None:
        return None if self._bregman is None else self._bregman[2]

    @property
    def bregman_residual(self) -> float | None:
        """``|gap + 2 kl + trace|``, which vanishes up to rounding."""
        if self._bregman is None:
            return None
        gap, kl, tr = self._bregman
        return abs(gap + 2.0 * kl + tr)

    @cached_property
    def residual_R(self) -> float | None:
        return None if self.T is None else residual_trace_norm(self.K_hat, self.T)

    @property
    def bound_window(self) -> tuple[float, float] | None:
        if self.T is None:
            return None
        e, R = self.epsilon, self.residual_R
        return (-self.dim * e * e - e * R, e * R)

    @cached_property
    def _frobenius(self):
        return frobenius_bias_bound(self.K_hat, self.K_tilde, self.epsilon)

    @property
    def frobenius_bias(self) -> float:
        return self._frobenius[0]

    @property
    def frobenius_actual(self) -> float:
        return self._frobenius[1]

    @property
    def kl_within_bound(self) -> bool | None:
        if not self.certified:
            return None
        return bool(self.kl_nats <= self.kl_bound + 1e-8)

    @property
    def window_holds(self) -> bool | None:
        if not self.certified or self.T is None:
            return None
        lo, hi = self.bound_window
        return bool(lo - 1e-8 <= self.loglik_gap <= hi + 1e-8)

    @property
    def out_of_sample_gain(self) -> bool | None:
        """Whether ``tr((K_tilde - K_hat)(T - K_hat^{-1})) < -2 KL``.

        Equivalent to a strictly positive likelihood gap at `T`.
        """
        if self._bregman is None:
            return None
        return bool(self._bregman[2] < -2.0 * self._bregman[1])

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "certified": self.certified,
            "kl_nats": self.kl_nats,
            "kl_bound": self.kl_bound,
            "kl_within_bound": self.kl_within_bound,
            "loglik_gap": self.loglik_gap,
            "bregman_trace_term": self.bregman_trace_term,
            "bregman_residual": self.bregman_residual,
            "residual_R": self.residual_R,
            "bound_window": None if self.bound_window is None else list(self.bound_window),
            "window_holds": self.window_holds,
            "out_of_sample_gain": self.out_of_sample_gain,
            "frobenius_bias": self.frobenius_bias,
            "frobenius_actual": self.frobenius_actual,
        }


@dataclass(frozen=True)
class TrainingRegimeReport:
    """``l(K_tilde) - l(K_mle) = -2 KL + tr(K_tilde Lambda)`` at the training data."""

    loglik_gap: float
    kl_cost: float
    lambda_term: float
    holds: bool


def regime_check_training(K_mle, K_tilde, S_train, kkt_tol: float = 1e-7, atol: float = 1e-6):
    """Check that sparsifying the training MLE cannot raise training likelihood.

    The KKT multiplier ``Lambda = K_mle^{-1} - S_train`` is nonnegative off
    the diagonal and zero on edges, and `K_tilde` has nonpositive
    off-diagonals, so ``tr(K_tilde Lambda) <= 0``.

    Raises
    ------
    NotOptimal
        If `K_mle` fails the KKT conditions for `S_train` at `kkt_tol`.
    """
    from .mle import kkt_residual

    report = kkt_residual(K_mle, S_train)
    if report.max_residual > kkt_tol:
        raise NotOptimal(
            f"K_mle is not the MTP2 MLE for S_train (KKT residual {report.max_residual:.3g} > {kkt_tol:g})"
        )
    K1 = as_array(K_mle)
    K2 = as_array(K_tilde)
    gap = log_likelihood(K2, S_train) - log_likelihood(K1, S_train)
    kl = gaussian_kl(K1, K2)
    lam_term = float(np.sum(K2 * report.dual_certificate))
    return TrainingRegimeReport(gap, kl, lam_term, bool(gap <= atol))


__all__ = [
    "DiagnosticsBundle",
    "TrainingRegimeReport",
    "bregman_gap",
    "frobenius_bias_bound",
    "gaussian_kl",
    "log_likelihood",
    "regime_check_training",
    "residual_trace_norm",
]
