"""Spectral sparsification of MTP2 Gaussian graphical models."""

__version__ = "0.1.0"

from .bss import SparsifierCertificate, edge_budget, kappa_epsilon, sparsify_laplacian
from .diagnostics import (
    DiagnosticsBundle,
    bregman_gap,
    frobenius_bias_bound,
    gaussian_kl,
    log_likelihood,
    regime_check_training,
    residual_trace_norm,
)
from .errors import (
    DimMismatch,
    Disconnected,
    EtaOutOfRange,
    InfeasibleSupport,
    InputError,
    InvalidEdge,
    InvalidParams,
    NoConvergence,
    NoFeasibleEdge,
    NotMMatrix,
    NotOptimal,
    NotPositiveDefinite,
    NumericalError,
    SpectralMTP2Error,
)
from .linalg import (
    EdgeSet,
    PrecisionMatrix,
    WeightedLaplacian,
    cholesky,
    extract_edges,
    is_m_matrix,
    laplacian_from_edges,
    loewner_range,
    loewner_range_laplacian,
    log_det,
)
from .mle import KktReport, kkt_residual, mtp2_mle
from .pipeline import SpectralMtp2Result, spectral_mtp2
from .scaling import SddmDecomposition, sddm_decompose, solve_row_sum_scaling
