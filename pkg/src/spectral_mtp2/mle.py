"""Maximum likelihood under the MTP2 (M-matrix) constraint.

Maximizes ``log det K - tr(K S)`` over positive definite ``K`` with
``K_ij <= 0`` off the diagonal, optionally with ``K_ij = 0`` forced
outside a given support.

The default solver is cyclic block coordinate ascent over columns. With
the rest of ``K`` fixed, column ``j`` is maximized exactly: writing
``W = (K without row/column j)^{-1}`` and ``k_12 = -beta``, the optimum is

    beta = argmin_{beta >= 0} S_jj beta^T W beta - 2 S_{-j,j}^T beta,
    K_jj = 1 / S_jj + beta^T W beta,

a small nonnegative quadratic program solved by a warm-started active set
method. ``Sigma = K^{-1}`` follows from the block inverse in ``O(d^2)``.

Once the residuals are small the nonzero pattern has settled, and Newton
steps on that fixed pattern (with backtracking that keeps every iterate
feasible and the objective nondecreasing) finish the job quadratically.
Cyclic sweeps resume whenever a Newton attempt fails or a new entry needs
to enter the support.

An entrywise variant (``method="entrywise"``) moves one symmetric pair
``K_ij = K_ji`` at a time; its exact step is a root of a scalar quadratic,
clipped to the feasible half-line. It converges much more slowly and is
kept as an independent cross-check.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleSupport, InputError, NoConvergence, NotPositiveDefinite
from .linalg import TOL_ZERO, EdgeSet, PrecisionMatrix, as_array, as_symmetric, log_det, spd_inverse

KKT_TOL = 1e-7
MAX_SWEEPS = 500
COND_WARN = 1e12
NEWTON_SWITCH = 1e-3
NEWTON_MAX_PARAMS = 5000
FINAL_POLISH = 1e-3
FINAL_SWEEPS = 10


@dataclass(frozen=True, eq=False)
class KktReport:
    """KKT residuals of a candidate MLE.

    `dual_certificate` holds ``Sigma - S`` on the zero off-diagonal entries
    of ``K`` (the multiplier matrix) and 0 elsewhere. Only entries inside the
    support carry a sign constraint.
    """

    edge_residual: float
    slack_residual: float
    diag_residual: float
    dual_certificate: np.ndarray
    sweeps: int = 0
    objective_trace: tuple = field(default=())

    @property
    def max_residual(self) -> float:
        return max(self.edge_residual, self.slack_residual, self.diag_residual)


def _support_mask(d: int, support: EdgeSet | None) -> np.ndarray:
    if support is None:
        mask = np.ones((d, d), dtype=bool)
    else:
        if support.dim != d:
            raise InputError(f"support is on {support.dim} vertices, covariance on {d}")
        mask = support.mask()
    np.fill_diagonal(mask, False)
    return mask


def kkt_residual(K, S, support: EdgeSet | None = None) -> KktReport:
    """Evaluate stationarity and complementary slackness at `K`."""
    K = as_array(K)
    S = as_symmetric(S, "S")
    d = K.shape[0]
    Sigma = spd_inverse(K)
    mask = _support_mask(d, support)
    offdiag = ~np.eye(d, dtype=bool)
    active = offdiag & (K != 0)
    zero = offdiag & (K == 0)
    constrained = zero & mask
    R = Sigma - S
    edge_res = float(np.max(np.abs(R[active]))) if active.any() else 0.0
    slack_res = float(np.max(np.maximum(-R[constrained], 0.0))) if constrained.any() else 0.0
    diag_res = float(np.max(np.abs(np.diag(R))))
    Lam = np.where(zero, R, 0.0)
    return KktReport(edge_res, slack_res, diag_res, Lam)


def _pair_step(a: float, sii: float, sjj: float, s: float) -> float:
    """Unconstrained maximizer of ``log((1+ta)^2 - t^2 sii sjj) - 2ts``."""
    c = a * a - sii * sjj
    if c >= 0:
        raise NotPositiveDefinite("current iterate lost positive definiteness")
    qa, qb, qc = s * c, 2.0 * a * s - c, s - a
    if qa == 0.0:
        return -qc / qb
    disc = math.sqrt(c * c + 4.0 * s * s * sii * sjj)
    qq = -0.5 * (qb + math.copysign(disc, qb))
    roots = (qq / qa, qc / qq) if qq != 0.0 else (-qb / (2 * qa),)
    for r in roots:
        if 1.0 + 2.0 * a * r + c * r * r > 0.0:
            return r
    raise NotPositiveDefinite("no stationary point inside the positive definite domain")


def _objective(K: np.ndarray, S: np.ndarray) -> float:
    return log_det(K) - float(np.sum(K * S))


def mtp2_mle(
    S,
    support: EdgeSet | None = None,
    kkt_tol: float = KKT_TOL,
    max_sweeps: int = MAX_SWEEPS,
    K0=None,
    method: str = "column",
    newton: bool = True,
) -> tuple[PrecisionMatrix, KktReport]:
    """MTP2-constrained Gaussian MLE for sample covariance `S`.

    Parameters
    ----------
    S : array_like, shape (d, d)
        Sample covariance with positive diagonal.
    support : EdgeSet, optional
        If given, ``K_ij`` is held at zero for pairs outside it.
    kkt_tol : float
        Stop once all KKT residuals are at most this.
    max_sweeps : int
        Maximum number of full coordinate sweeps.
    K0 : array_like, optional
        Feasible starting point; defaults to ``diag(1 / diag(S))``.
    method : {"column", "entrywise"}
        Block size of the coordinate ascent.
    newton : bool
        Finish with Newton steps on the settled support (skipped when the
        support has more than ``NEWTON_MAX_PARAMS`` free entries).

    Returns
    -------
    K : PrecisionMatrix
    report : KktReport
        Residuals at the returned iterate plus the per-sweep objective trace.

    Raises
    ------
    NoConvergence
        If the residuals are still above `kkt_tol` after `max_sweeps`.
    InfeasibleSupport
        If an iterate stops being positive definite.
    """
    S = as_symmetric(S, "S")
    d = S.shape[0]
    sdiag = np.diag(S).copy()
    if np.any(sdiag <= 0):
        raise InputError("sample covariance must have a positive diagonal")
    mask = _support_mask(d, support)
    if K0 is None:
        K = np.diag(1.0 / sdiag)
    else:
        K = np.array(as_array(K0), dtype=float)
        if K.shape != S.shape:
            raise InputError(f"K0 has shape {K.shape}, S has {S.shape}")
        if np.any((K - np.diag(np.diag(K))) > TOL_ZERO):
            raise InputError("K0 must have nonpositive off-diagonal entries")
        K[~mask & ~np.eye(d, dtype=bool)] = 0.0
    Sigma = spd_inverse(K)
    if method == "column":
        sweep = lambda K, Sigma: _column_sweep(K, Sigma, S, mask)  # noqa: E731
    elif method == "entrywise":
        # row-major order over the free upper-triangular entries, diagonal first
        order = []
        for i in range(d):
            order.append((i, i))
            order.extend((i, int(j)) for j in np.nonzero(mask[i, i + 1:])[0] + i + 1)
        sweep = lambda K, Sigma: _entry_sweep(K, Sigma, S, order)  # noqa: E731
    else:
        raise ValueError(f"unknown method {method!r}")

    trace = [_objective(K, S)]
    report = kkt_residual(K, S, support)
    # past kkt_tol, keep going briefly so the iterate (not only the residual) is accurate
    tight = FINAL_POLISH * kkt_tol if newton else kkt_tol
    sweeps = 0
    extra = 0
    cooldown = 0
    while report.max_residual > tight:
        if report.max_residual <= kkt_tol:
            if extra >= FINAL_SWEEPS:
                break
            extra += 1
        if sweeps >= max_sweeps:
            if report.max_residual <= kkt_tol:
                break
            raise NoConvergence(
                f"MTP2 MLE not converged after {max_sweeps} sweeps "
                f"(max KKT residual {report.max_residual:.3g} > {kkt_tol:g})"
            )
        if newton and cooldown == 0 and report.max_residual <= NEWTON_SWITCH:
            if not _newton_polish(K, S, tight, trace):
                cooldown = 5
            Sigma = spd_inverse(K)
            report = kkt_residual(K, S, support)
            if report.max_residual <= tight:
                sweeps += 1
                break
            # the pattern must change: let a sweep move entries in or out
            cooldown = max(cooldown, 1)
        try:
            sweep(K, Sigma)
        except NotPositiveDefinite as exc:
            raise InfeasibleSupport(f"iterate lost positive definiteness: {exc}") from None
        trace.append(_objective(K, S))
        cooldown = max(cooldown - 1, 0)
        try:
            Sigma = spd_inverse(K)
        except NotPositiveDefinite as exc:
            raise InfeasibleSupport(f"iterate lost positive definiteness: {exc}") from None
        sweeps += 1
        report = kkt_residual(K, S, support)
    cond = np.linalg.cond(K)
    if cond > COND_WARN:
        warnings.warn(f"MTP2 MLE is ill-conditioned (cond {cond:.3g})", RuntimeWarning)
    report = KktReport(
        report.edge_residual,
        report.slack_residual,
        report.diag_residual,
        report.dual_certificate,
        sweeps,
        tuple(trace),
    )
    K = 0.5 * (K + K.T)
    return PrecisionMatrix(as_symmetric(K), True), report


def _newton_polish(K: np.ndarray, S: np.ndarray, kkt_tol: float, trace: list, max_steps: int = 30) -> bool:
    """Newton ascent on the current nonzero pattern of `K`, in place.

    Returns True if the pattern-restricted gradient was driven below
    `kkt_tol`; on failure `K` is left at the last accepted iterate.
    """
    d = K.shape[0]
    iu, ju = np.nonzero(np.triu(K != 0, k=1))
    I = np.concatenate([np.arange(d), iu])
    J = np.concatenate([np.arange(d), ju])
    p = len(I)
    if p > NEWTON_MAX_PARAMS:
        return False
    # E_p = c_p (e_i e_j^T + e_j e_i^T), c_p = 1/2 on the diagonal
    c = np.where(I == J, 0.5, 1.0)
    off = I != J
    f = trace[-1]
    for _ in range(max_steps):
        Sigma = spd_inverse(K)
        R = Sigma - S
        if max(np.max(np.abs(R[I, J])), 0.0) <= 0.1 * kkt_tol:
            return True
        g = 2.0 * c * R[I, J]
        H = Sigma[np.ix_(I, I)] * Sigma[np.ix_(J, J)] + Sigma[np.ix_(I, J)] * Sigma[np.ix_(J, I)]
        H *= 2.0 * np.outer(c, c)
        try:
            theta = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            return False
        step = np.zeros((d, d))
        step[I, J] = c * theta
        step[J, I] += c * theta * off
        step[I[~off], I[~off]] = theta[~off]
        alpha = 1.0
        while alpha > 1e-4:
            Kn = K + alpha * step
            if np.all(Kn[I[off], J[off]] < 0):
                try:
                    fn = _objective(Kn, S)
                except NotPositiveDefinite:
                    fn = -np.inf
                if fn >= f:
                    break
            alpha *= 0.5
        else:
            return False
        K[:] = Kn
        f = fn
        trace.append(f)
    return False


def _nnqp(H: np.ndarray, g: np.ndarray, beta0: np.ndarray, max_iter: int | None = None) -> np.ndarray:
    """Minimize ``beta^T H beta / 2 - g^T beta`` over ``beta >= 0``.

    Lawson-Hanson active set iteration started from the feasible point
    `beta0`; `H` must be positive definite.
    """
    n = len(g)
    beta = np.where(beta0 > 0, beta0, 0.0)
    P = beta > 0
    if n == 0:
        return beta
    tol = 1e-14 * max(1.0, float(np.max(np.abs(g))))
    max_iter = max_iter or 3 * n + 20
    added = -1
    for _ in range(max_iter):
        while True:
            z = np.zeros(n)
            if P.any():
                idx = np.flatnonzero(P)
                z[idx] = np.linalg.solve(H[np.ix_(idx, idx)], g[idx])
            bad = P & (z <= 0)
            if not bad.any():
                beta = z
                break
            if added >= 0 and bad[added] and beta[added] == 0:
                # the entering index cannot move: optimal to rounding
                P[added] = False
                added = -1
                continue
            alpha = np.min(beta[bad] / (beta[bad] - z[bad]))
            beta = beta + alpha * (z - beta)
            P &= beta > 0
            beta[~P] = 0.0
        w = g - H @ beta
        w[P] = -np.inf
        k = int(np.argmax(w))
        if w[k] <= tol:
            return beta
        P[k] = True
        added = k
    return beta


def _column_sweep(K: np.ndarray, Sigma: np.ndarray, S: np.ndarray, mask: np.ndarray) -> None:
    """One in-place pass of exact column maximizations."""
    d = K.shape[0]
    for j in range(d):
        idx = np.delete(np.arange(d), j)
        s22 = S[j, j]
        sig22 = Sigma[j, j]
        sig12 = Sigma[idx, j]
        W = Sigma[np.ix_(idx, idx)] - np.outer(sig12, sig12) / sig22
        free = np.flatnonzero(mask[j, idx])
        beta = np.zeros(d - 1)
        if len(free):
            WF = W[np.ix_(free, free)]
            beta[free] = _nnqp(s22 * WF, S[idx[free], j], -K[idx[free], j])
        Wb = W[:, free] @ beta[free]
        K[idx, j] = K[j, idx] = -beta
        K[j, j] = 1.0 / s22 + float(beta[free] @ Wb[free])
        new12 = s22 * Wb
        Sigma[np.ix_(idx, idx)] = W + np.outer(new12, new12) / s22
        Sigma[idx, j] = Sigma[j, idx] = new12
        Sigma[j, j] = s22


def _entry_sweep(K: np.ndarray, Sigma: np.ndarray, S: np.ndarray, order) -> None:
    """One in-place cyclic pass over `order`."""
    for i, j in order:
        if i == j:
            sii = Sigma[i, i]
            t = 1.0 / S[i, i] - 1.0 / sii
            if t == 0.0:
                continue
            K[i, i] += t
            x = Sigma[:, i].copy()
            Sigma -= (t / (1.0 + t * sii)) * np.outer(x, x)
            continue
        k = K[i, j]
        a = Sigma[i, j]
        s = S[i, j]
        if k == 0.0 and a >= s:
            continue
        sii, sjj = Sigma[i, i], Sigma[j, j]
        t = min(_pair_step(a, sii, sjj, s), -k)
        if t == 0.0:
            continue
        K[i, j] += t
        K[j, i] = K[i, j]
        b = a + 1.0 / t
        det = sii * sjj - b * b
        X = Sigma[:, [i, j]]
        Minv = np.array([[sjj, -b], [-b, sii]]) / det
        Sigma -= (X @ Minv) @ X.T
