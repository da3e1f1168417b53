"""Dense symmetric-matrix and weighted-graph primitives.

Indices are 0-based everywhere in the code; reports and files that show
edges to people convert to 1-based at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator

import numpy as np
import scipy.linalg
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _cc

from .errors import DimMismatch, InputError, InvalidEdge, NotMMatrix, NotPositiveDefinite

PD_RTOL = 1e-10
EDGE_TOL = 1e-6
TOL_ZERO = 1e-12
SYMMETRY_RTOL = 1e-10


def as_symmetric(M, name: str = "matrix") -> np.ndarray:
    """Return a read-only float64 copy of `M` with exact symmetry.

    Asymmetry below ``SYMMETRY_RTOL`` (relative to the largest entry) is
    removed by averaging with the transpose; anything larger is an error.
    """
    A = np.array(M, dtype=float, copy=True)
    if A.ndim == 0:
        A = A.reshape(1, 1)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise InputError(f"{name} must be a non-empty square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InputError(f"{name} has non-finite entries")
    scale = max(np.max(np.abs(A)), 1.0)
    if np.max(np.abs(A - A.T)) > SYMMETRY_RTOL * scale:
        raise InputError(f"{name} is not symmetric")
    A = 0.5 * (A + A.T)
    A.setflags(write=False)
    return A


def pd_tolerance(M: np.ndarray) -> float:
    return PD_RTOL * max(float(np.max(np.diag(M))), np.finfo(float).tiny)


def _check_same_dim(A: np.ndarray, B: np.ndarray) -> None:
    if A.shape != B.shape:
        raise DimMismatch(f"dimension mismatch: {A.shape} vs {B.shape}")


def cholesky(M: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, raising NotPositiveDefinite on failure.

    A pivot ``L_ii**2`` below ``1e-10 * max(diag(M))`` counts as failure.
    """
    M = np.asarray(M, dtype=float)
    try:
        R = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("matrix is not positive definite") from None
    if np.min(np.diag(R)) ** 2 <= pd_tolerance(M):
        raise NotPositiveDefinite("matrix is numerically singular")
    return R


def log_det(M) -> float:
    """Log-determinant of a positive definite matrix via Cholesky."""
    R = cholesky(as_symmetric(M))
    return float(2.0 * np.sum(np.log(np.diag(R))))


def spd_inverse(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    R = cholesky(M)
    inv = scipy.linalg.cho_solve((R, True), np.eye(M.shape[0]))
    return 0.5 * (inv + inv.T)


def is_m_matrix(M, tol: float = TOL_ZERO) -> bool:
    """True if `M` is positive definite with off-diagonals ``<= tol``."""
    M = np.asarray(M, dtype=float)
    off = M - np.diag(np.diag(M))
    if np.any(off > tol):
        return False
    try:
        cholesky(M)
    except NotPositiveDefinite:
        return False
    return True


@dataclass(frozen=True, eq=False)
class PrecisionMatrix:
    """A symmetric positive definite matrix with an M-matrix certificate."""

    matrix: np.ndarray
    is_m_matrix: bool = False

    @classmethod
    def from_array(cls, M, require_m_matrix: bool = False, tol: float = TOL_ZERO):
        A = as_symmetric(M, "precision matrix")
        cholesky(A)
        off = A - np.diag(np.diag(A))
        m_matrix = not np.any(off > tol)
        if require_m_matrix and not m_matrix:
            i, j = np.unravel_index(np.argmax(off), off.shape)
            raise NotMMatrix(
                f"entry ({i + 1},{j + 1}) = {A[i, j]:.3g} is positive; input is not an M-matrix"
            )
        return cls(A, m_matrix)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.matrix, dtype=dtype)


def as_array(K) -> np.ndarray:
    if isinstance(K, PrecisionMatrix):
        return K.matrix
    return np.asarray(K, dtype=float)


@dataclass(frozen=True)
class EdgeSet:
    """Unordered vertex pairs ``(i, j)`` with ``i < j`` on ``dim`` vertices."""

    dim: int
    pairs: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        clean = set()
        for i, j in self.pairs:
            i, j = int(i), int(j)
            if i == j:
                raise InvalidEdge(f"self-loop at vertex {i + 1}")
            if not (0 <= i < self.dim and 0 <= j < self.dim):
                raise InvalidEdge(f"edge ({i + 1},{j + 1}) out of range for dim {self.dim}")
            clean.add((min(i, j), max(i, j)))
        object.__setattr__(self, "pairs", frozenset(clean))

    @classmethod
    def from_pairs(cls, dim: int, pairs: Iterable) -> "EdgeSet":
        return cls(dim, frozenset(tuple(p) for p in pairs))

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[tuple[int, int]]:
        return iter(sorted(self.pairs))

    def __contains__(self, pair) -> bool:
        i, j = pair
        return (min(i, j), max(i, j)) in self.pairs

    def as_array(self) -> np.ndarray:
        if not self.pairs:
            return np.zeros((0, 2), dtype=int)
        return np.array(sorted(self.pairs), dtype=int)

    def mask(self) -> np.ndarray:
        """Symmetric boolean adjacency mask."""
        M = np.zeros((self.dim, self.dim), dtype=bool)
        idx = self.as_array()
        M[idx[:, 0], idx[:, 1]] = True
        M[idx[:, 1], idx[:, 0]] = True
        return M

    def one_based(self) -> list[tuple[int, int]]:
        return [(i + 1, j + 1) for i, j in self]


def extract_edges(M, edge_tol: float = EDGE_TOL) -> EdgeSet:
    """Pairs ``i < j`` with ``|M_ij| > edge_tol``."""
    A = as_array(M)
    iu, ju = np.triu_indices(A.shape[0], k=1)
    keep = np.abs(A[iu, ju]) > edge_tol
    return EdgeSet(A.shape[0], frozenset(zip(iu[keep].tolist(), ju[keep].tolist())))


@dataclass(frozen=True, eq=False)
class WeightedLaplacian:
    """Laplacian ``D - A`` of a weighted simple graph.

    `edges` is an ``(m, 2)`` integer array with ``i < j`` in lexicographic
    order and `weights` the matching positive conductances.
    """

    dim: int
    edges: np.ndarray
    weights: np.ndarray

    @cached_property
    def dense(self) -> np.ndarray:
        d = self.dim
        L = np.zeros((d, d))
        if len(self.weights):
            i, j = self.edges[:, 0], self.edges[:, 1]
            L[i, j] = -self.weights
            L[j, i] = -self.weights
            np.add.at(L, (i, i), self.weights)
            np.add.at(L, (j, j), self.weights)
        L.setflags(write=False)
        return L

    @property
    def n_edges(self) -> int:
        return len(self.weights)

    def edge_set(self) -> EdgeSet:
        return EdgeSet(self.dim, frozenset(map(tuple, self.edges.tolist())))

    def is_connected(self) -> bool:
        return n_components(self.dim, self.edges) == 1

    @classmethod
    def from_dense(cls, M, edge_tol: float = 0.0) -> "WeightedLaplacian":
        """Graph whose conductances are the negated off-diagonals of `M`.

        Only the off-diagonal part is read; entries with ``|M_ij| <= edge_tol``
        are treated as absent.
        """
        A = as_array(M)
        iu, ju = np.triu_indices(A.shape[0], k=1)
        vals = A[iu, ju]
        keep = np.abs(vals) > edge_tol
        if np.any(vals[keep] > 0):
            raise InvalidEdge("positive off-diagonal entry cannot be a Laplacian edge")
        edges = np.stack([iu[keep], ju[keep]], axis=1).astype(int)
        return cls(A.shape[0], edges, -vals[keep].astype(float))


def laplacian_from_edges(d: int, edges) -> WeightedLaplacian:
    """Build a Laplacian from ``(i, j, w)`` triples (0-based indices)."""
    if d < 1:
        raise InvalidEdge("dimension must be at least 1")
    seen = {}
    for e in edges:
        i, j, w = int(e[0]), int(e[1]), float(e[2])
        if i == j:
            raise InvalidEdge(f"self-loop at vertex {i + 1}")
        if not (0 <= i < d and 0 <= j < d):
            raise InvalidEdge(f"edge ({i + 1},{j + 1}) out of range for dim {d}")
        if not (w > 0 and np.isfinite(w)):
            raise InvalidEdge(f"edge ({i + 1},{j + 1}) has nonpositive weight {w}")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise InvalidEdge(f"duplicate edge ({key[0] + 1},{key[1] + 1})")
        seen[key] = w
    keys = sorted(seen)
    arr = np.array(keys, dtype=int).reshape(-1, 2)
    return WeightedLaplacian(d, arr, np.array([seen[k] for k in keys], dtype=float))


def n_components(d: int, edges: np.ndarray) -> int:
    return component_labels(d, edges)[0]


def component_labels(d: int, edges: np.ndarray) -> tuple[int, np.ndarray]:
    edges = np.asarray(edges, dtype=int).reshape(-1, 2)
    g = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(d, d))
    return _cc(g, directed=False)


def loewner_range(A, B) -> tuple[float, float]:
    """Extreme eigenvalues of ``A^{-1/2} B A^{-1/2}``.

    ``a A <= B <= b A`` in Loewner order exactly when the returned
    interval lies inside ``[a, b]``.
    """
    A = as_symmetric(as_array(A), "A")
    B = as_symmetric(as_array(B), "B")
    _check_same_dim(A, B)
    R = cholesky(A)
    # R^{-1} B R^{-T} is congruent to A^{-1/2} B A^{-1/2}
    X = scipy.linalg.solve_triangular(R, B, lower=True)
    X = scipy.linalg.solve_triangular(R, X.T, lower=True)
    mu = np.linalg.eigvalsh(0.5 * (X + X.T))
    return float(mu[0]), float(mu[-1])


def complement_basis(d: int) -> np.ndarray:
    """Orthonormal ``d x (d-1)`` basis of the complement of the ones vector."""
    return scipy.linalg.null_space(np.ones((1, d)))


def loewner_range_laplacian(L, L_tilde) -> tuple[float, float]:
    """`loewner_range` of two Laplacians restricted to the complement of 1.

    `L` must be connected so that its restriction is positive definite.
    """
    L = as_array(L.dense if isinstance(L, WeightedLaplacian) else L)
    Lt = as_array(L_tilde.dense if isinstance(L_tilde, WeightedLaplacian) else L_tilde)
    _check_same_dim(L, Lt)
    d = L.shape[0]
    if d == 1:
        return 1.0, 1.0
    Q = complement_basis(d)
    return loewner_range(Q.T @ L @ Q, Q.T @ Lt @ Q)
