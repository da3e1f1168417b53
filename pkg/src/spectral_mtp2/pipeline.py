"""End-to-end sparsification of an MTP2 precision matrix.

1. scale ``K_hat`` by a positive diagonal to ``B = Xi K_hat Xi`` with
   positive row sums ``u``;
2. split ``B = L_B + diag(u)``;
3. sparsify ``L_B`` with the barrier method (per connected component);
4. reassemble ``B_tilde = L_tilde + diag(u)``;
5. undo the scaling, ``K_tilde = Xi^{-1} B_tilde Xi^{-1}``;
6. optionally refit the MTP2 MLE on the support of ``K_tilde``.

``L_tilde`` is within ``1 +- eps`` of ``L_B`` and ``diag(u)`` is untouched,
so ``(1 - eps) K_hat <= K_tilde <= (1 + eps) K_hat`` on all of R^d.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import __version__
from .bss import SparsifierCertificate, kappa_epsilon, sparsify_laplacian
from .diagnostics import DiagnosticsBundle, gaussian_kl, log_likelihood, residual_trace_norm
from .linalg import (
    EDGE_TOL,
    PrecisionMatrix,
    WeightedLaplacian,
    as_array,
    as_symmetric,
    component_labels,
    extract_edges,
    loewner_range,
)
from .mle import KKT_TOL, MAX_SWEEPS, KktReport, mtp2_mle
from .scaling import MAX_ITER, SCALING_TOL, SddmDecomposition, sddm_decompose


def sparsify_components(L: WeightedLaplacian, eta: float, **bss_options):
    """Sparsify each connected component of `L` with its own edge budget.

    Returns the reassembled Laplacian and one certificate covering all
    components (budgets and edge counts summed, ranges merged).
    """
    kappa, eps = kappa_epsilon(eta)
    d = L.dim
    n_comp, labels = component_labels(d, L.edges)
    edges, weights = [], []
    budget, used = 0, 0
    lo, hi = 1.0, 1.0
    trace = bss_options.pop("trace", None)
    for c in range(n_comp):
        nodes = np.flatnonzero(labels == c)
        if len(nodes) < 2:
            continue
        local = np.full(d, -1)
        local[nodes] = np.arange(len(nodes))
        sel = labels[L.edges[:, 0]] == c
        sub = WeightedLaplacian(len(nodes), local[L.edges[sel]], L.weights[sel])
        sub_trace = [] if trace is not None else None
        Lt, cert = sparsify_laplacian(sub, eta, trace=sub_trace, **bss_options)
        if trace is not None:
            for row in sub_trace:
                row = dict(row, component=c)
                i, j = row["edge"]
                row["edge"] = (int(nodes[i - 1]) + 1, int(nodes[j - 1]) + 1)
                trace.append(row)
        edges.append(nodes[Lt.edges])
        weights.append(Lt.weights)
        budget += cert.edge_budget
        used += cert.edges_used
        lo = min(lo, cert.achieved_range[0])
        hi = max(hi, cert.achieved_range[1])
    if edges:
        E = np.concatenate(edges)
        w = np.concatenate(weights)
        order = np.lexsort((E[:, 1], E[:, 0]))
        E, w = E[order], w[order]
    else:
        E, w = np.zeros((0, 2), dtype=int), np.zeros(0)
    cert = SparsifierCertificate(float(eta), kappa, eps, budget, used, (lo, hi))
    return WeightedLaplacian(d, E, w), cert


@dataclass(frozen=True, eq=False)
class SpectralMtp2Result:
    """Output of :func:`spectral_mtp2`.

    `diagnostics` compares `K_tilde` with `K_hat` at `S_test` (if given);
    `train_diagnostics` does the same at the refit covariance.
    """

    K_hat: PrecisionMatrix
    K_tilde: PrecisionMatrix
    K_refit: PrecisionMatrix | None
    cert: SparsifierCertificate
    decomposition: SddmDecomposition
    L_tilde: WeightedLaplacian
    diagnostics: DiagnosticsBundle
    train_diagnostics: DiagnosticsBundle | None = None
    refit_report: KktReport | None = None
    S_refit: np.ndarray | None = None
    S_test: np.ndarray | None = None
    edge_tol: float = EDGE_TOL

    @property
    def epsilon(self) -> float:
        return self.cert.epsilon

    @property
    def K_out(self) -> PrecisionMatrix:
        """The refit if one was computed, else `K_tilde`."""
        return self.K_refit if self.K_refit is not None else self.K_tilde

    @cached_property
    def sandwich_range(self) -> tuple[float, float]:
        """Extreme eigenvalues of ``K_hat^{-1/2} K_tilde K_hat^{-1/2}``."""
        return loewner_range(self.K_hat, self.K_tilde)

    @property
    def sandwich_holds(self) -> bool:
        lo, hi = self.sandwich_range
        e = self.epsilon
        return bool(lo >= 1 - e - 1e-8 and hi <= 1 + e + 1e-8)

    @property
    def certified(self) -> bool:
        """Edge budget respected and the full-space sandwich verified."""
        return bool(self.cert.certified and self.sandwich_holds)

    @property
    def bounds_certified(self) -> bool:
        """`certified` and ``eps <= 1/2``, so the KL and likelihood bounds apply."""
        return bool(self.certified and self.diagnostics.certified)

    @cached_property
    def refit_gain(self) -> tuple[float, float] | None:
        """``(l(K_refit; S) - l(K_tilde; S), 2 KL(K_refit, K_tilde))``."""
        if self.K_refit is None:
            return None
        gain = log_likelihood(self.K_refit, self.S_refit) - log_likelihood(self.K_tilde, self.S_refit)
        return gain, 2.0 * gaussian_kl(self.K_refit, self.K_tilde)

    def report(self) -> dict:
        """Flat JSON-ready summary; missing quantities are None."""
        out = self.K_out
        diag = self.diagnostics
        rg = self.refit_gain
        return {
            "eta": self.cert.eta,
            "kappa": self.cert.kappa,
            "epsilon": self.cert.epsilon,
            "edges_input": len(extract_edges(self.K_hat, self.edge_tol)),
            "edges_output": len(extract_edges(out, self.edge_tol)),
            "loglik_train": None if self.S_refit is None else log_likelihood(out, self.S_refit),
            "loglik_test": None if self.S_test is None else log_likelihood(out, self.S_test),
            "kl_nats": diag.kl_nats,
            "kl_bound": diag.kl_bound,
            "R_train": None if self.S_refit is None else residual_trace_norm(self.K_hat, self.S_refit),
            "R_test": diag.residual_R,
            "frobenius_actual": diag.frobenius_actual,
            "frobenius_bound": diag.frobenius_bias,
            "certified": self.certified,
            "bounds_certified": self.bounds_certified,
            "edge_budget": self.cert.edge_budget,
            "edges_used": self.cert.edges_used,
            "laplacian_range": list(self.cert.achieved_range),
            "sandwich_range": list(self.sandwich_range),
            "refit_gain": None if rg is None else rg[0],
            "refit_two_kl": None if rg is None else rg[1],
            "diagnostics": diag.to_dict(),
            "version": __version__,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.report(), **kwargs)


def spectral_mtp2(
    K_hat,
    eta: float,
    S_refit=None,
    S_test=None,
    edge_tol: float = EDGE_TOL,
    scaling_tol: float = SCALING_TOL,
    max_iter: int = MAX_ITER,
    kkt_tol: float = KKT_TOL,
    max_sweeps: int = MAX_SWEEPS,
    bss_method: str = "resolvent",
    cross_check_every: int | None = None,
    trace: list | None = None,
) -> SpectralMtp2Result:
    """Sparsify an MTP2 precision matrix with a spectral certificate.

    Parameters
    ----------
    K_hat : array_like or PrecisionMatrix
        M-matrix to sparsify. Off-diagonals with ``|K_ij| <= edge_tol`` are
        treated as zero.
    eta : float
        Sparsity parameter, ``> 1``. The output keeps at most
        ``ceil(eta (d_c - 1))`` edges per connected component of size ``d_c``.
    S_refit : array_like, optional
        Covariance for refitting the MTP2 MLE on the sparse support,
        started from ``K_tilde``.
    S_test : array_like, optional
        Held-out covariance for the likelihood diagnostics.

    Raises
    ------
    NotMMatrix, EtaOutOfRange
        On invalid input.
    NoFeasibleEdge, NoConvergence, InfeasibleSupport
        Propagated from the stages.
    """
    kappa_epsilon(eta)
    K_in = as_symmetric(as_array(K_hat), "K_hat")
    dec = sddm_decompose(K_in, scaling_tol=scaling_tol, max_iter=max_iter, edge_tol=edge_tol)
    L_tilde, cert = sparsify_components(
        dec.L_B, eta, method=bss_method, cross_check_every=cross_check_every, trace=trace
    )
    inv = 1.0 / dec.scaling.xi
    K_t = (L_tilde.dense + np.diag(dec.u)) * np.outer(inv, inv)
    K_tilde = PrecisionMatrix.from_array(K_t, require_m_matrix=True)
    K_hat_pm = PrecisionMatrix(K_in, True)

    K_refit, refit_report, S_r = None, None, None
    if S_refit is not None:
        S_r = as_symmetric(as_array(S_refit), "S_refit")
        K_refit, refit_report = mtp2_mle(
            S_r,
            support=L_tilde.edge_set(),
            kkt_tol=kkt_tol,
            max_sweeps=max_sweeps,
            K0=K_tilde.matrix,
        )
    S_t = None if S_test is None else as_symmetric(as_array(S_test), "S_test")
    diagnostics = DiagnosticsBundle(K_in, K_tilde.matrix, cert.epsilon, S_t)
    train_diag = None if S_r is None else DiagnosticsBundle(K_in, K_tilde.matrix, cert.epsilon, S_r)
    return SpectralMtp2Result(
        K_hat=K_hat_pm,
        K_tilde=K_tilde,
        K_refit=K_refit,
        cert=cert,
        decomposition=dec,
        L_tilde=L_tilde,
        diagnostics=diagnostics,
        train_diagnostics=train_diag,
        refit_report=refit_report,
        S_refit=S_r,
        S_test=S_t,
        edge_tol=edge_tol,
    )


__all__ = ["SpectralMtp2Result", "sparsify_components", "spectral_mtp2"]
