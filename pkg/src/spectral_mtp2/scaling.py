"""Diagonal congruence of an M-matrix onto SDDM form.

``B = Xi K Xi`` with positive diagonal ``Xi`` chosen so that every row sum
of ``B`` is positive; ``B`` then splits as a graph Laplacian plus the
positive diagonal of row sums.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NoConvergence, NotMMatrix
from .linalg import (
    EDGE_TOL,
    TOL_ZERO,
    WeightedLaplacian,
    as_array,
    as_symmetric,
    cholesky,
)

SCALING_TOL = 1e-10
MAX_ITER = 10_000


@dataclass(frozen=True, eq=False)
class DiagonalScaling:
    xi: np.ndarray
    target_u: np.ndarray
    residual: float
    iterations: int = 0
    history: tuple = ()

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.xi == 1.0))


@dataclass(frozen=True, eq=False)
class SddmDecomposition:
    B: np.ndarray
    u: np.ndarray
    L_B: WeightedLaplacian
    scaling: DiagonalScaling

    def reconstruct(self) -> np.ndarray:
        """Undo the congruence: ``Xi^{-1} (L_B + diag(u)) Xi^{-1}``."""
        inv = 1.0 / self.scaling.xi
        return (self.L_B.dense + np.diag(self.u)) * np.outer(inv, inv)


def solve_row_sum_scaling(
    W,
    u=None,
    scaling_tol: float = SCALING_TOL,
    max_iter: int = MAX_ITER,
    record_history: bool = False,
) -> DiagonalScaling:
    """Find positive ``xi`` with ``xi_i (W xi)_i = u_i`` for all ``i``.

    Jacobi sweeps of the closed-form coordinate update

        xi_i <- (-r_i + sqrt(r_i^2 + 4 u_i W_ii)) / (2 W_ii),
        r_i   = sum_{j != i} W_ij xi_j,

    started from ``xi = 1/sqrt(diag(W))``. Each sweep uses only the previous
    iterate, so the result does not depend on evaluation order.

    Raises
    ------
    NotPositiveDefinite
        If `W` is not positive definite.
    NoConvergence
        If the residual ``max_i |xi_i (W xi)_i - u_i|`` stays above
        `scaling_tol` after `max_iter` sweeps.
    """
    W = as_symmetric(as_array(W), "W")
    d = W.shape[0]
    cholesky(W)
    u = np.ones(d) if u is None else np.asarray(u, dtype=float).reshape(d)
    if np.any(u <= 0):
        raise InputError("target row sums must be strictly positive")
    w = np.diag(W).copy()
    off = W - np.diag(w)
    xi = 1.0 / np.sqrt(w)
    history = []
    for it in range(max_iter + 1):
        r = off @ xi
        resid = float(np.max(np.abs(xi * (w * xi + r) - u)))
        if record_history:
            history.append(resid)
        if resid <= scaling_tol:
            return DiagonalScaling(xi, u, resid, it, tuple(history))
        if it == max_iter:
            break
        xi = (-r + np.sqrt(r * r + 4.0 * u * w)) / (2.0 * w)
    raise NoConvergence(
        f"row-sum scaling did not reach {scaling_tol:g} after {max_iter} sweeps "
        f"(residual {resid:.3g}); input may be ill-conditioned"
    )


def clean_off_diagonal(K, edge_tol: float = EDGE_TOL) -> np.ndarray:
    """Copy of `K` with off-diagonals of magnitude ``<= edge_tol`` set to 0."""
    A = np.array(as_array(K), dtype=float)
    small = np.abs(A) <= edge_tol
    np.fill_diagonal(small, False)
    A[small] = 0.0
    return A


def sddm_decompose(
    K_hat,
    scaling_tol: float = SCALING_TOL,
    max_iter: int = MAX_ITER,
    edge_tol: float = EDGE_TOL,
) -> SddmDecomposition:
    """Scale an M-matrix to SDDM form and split off its Laplacian.

    Off-diagonal entries with ``|K_ij| <= edge_tol`` are solver residue and
    are zeroed before scaling, so the Laplacian's edge set is exactly
    ``extract_edges(K_hat, edge_tol)``. If the (cleaned) row sums are already
    positive the identity scaling with ``u = K 1`` is used; otherwise ``u = 1``
    is targeted by :func:`solve_row_sum_scaling`.
    """
    K = as_symmetric(clean_off_diagonal(K_hat, edge_tol), "K_hat")
    cholesky(K)
    off = K - np.diag(np.diag(K))
    if np.any(off > TOL_ZERO):
        i, j = np.unravel_index(np.argmax(off), off.shape)
        raise NotMMatrix(f"entry ({i + 1},{j + 1}) = {K[i, j]:.3g} > 0; input is not an M-matrix")
    d = K.shape[0]
    row_sums = K.sum(axis=1)
    if np.all(row_sums > 0):
        scaling = DiagonalScaling(np.ones(d), row_sums, 0.0)
        B = K.copy()
    else:
        scaling = solve_row_sum_scaling(K, np.ones(d), scaling_tol, max_iter)
        B = K * np.outer(scaling.xi, scaling.xi)
    B = 0.5 * (B + B.T)
    u = B.sum(axis=1)
    L_B = WeightedLaplacian.from_dense(B, edge_tol=0.0)
    B.setflags(write=False)
    return SddmDecomposition(B, u, L_B, scaling)
