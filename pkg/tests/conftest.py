import numpy as np
import pytest

from spectral_mtp2.linalg import laplacian_from_edges


def random_connected_graph(rng, d, density=None, wlo=0.1, whi=10.0):
    """Random spanning tree plus extra edges, weights uniform on [wlo, whi].

    `density` is the fraction of the non-tree pairs that are added
    (0 gives a tree, 1 the complete graph).
    """
    if density is None:
        density = rng.uniform()
    perm = rng.permutation(d)
    edges = {tuple(sorted((int(perm[k]), int(perm[rng.integers(k)])))) for k in range(1, d)}
    others = [(i, j) for i in range(d) for j in range(i + 1, d) if (i, j) not in edges]
    take = rng.uniform(size=len(others)) < density
    edges |= {e for e, t in zip(others, take) if t}
    edges = sorted(edges)
    w = rng.uniform(wlo, whi, size=len(edges))
    return laplacian_from_edges(d, [(i, j, x) for (i, j), x in zip(edges, w)])


def random_m_matrix(rng, d, density=None, spread=1.0):
    """Random M-matrix ``Xi (L + D) Xi`` with positive diagonals ``D`` and ``Xi``.

    A wide spread of ``Xi`` makes some row sums negative, which exercises
    the nontrivial scaling path.
    """
    L = random_connected_graph(rng, d, density, 0.1, 2.0).dense
    B = L + np.diag(rng.uniform(0.05, 1.0, size=d))
    xi = np.exp(spread * rng.standard_normal(d))
    K = B * np.outer(xi, xi)
    return 0.5 * (K + K.T)


def random_spd(rng, d, cond=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    lam = np.exp(rng.uniform(0, np.log(cond), size=d))
    M = (Q * lam) @ Q.T
    return 0.5 * (M + M.T)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
