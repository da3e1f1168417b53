"""Matrix and edge-list file I/O.

Dense matrices are stored either as headerless CSV or as symmetric
coordinate Matrix Market. Every float is written with 17 significant
digits so that a write/read cycle reproduces the float64 bits.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import InputError
from .linalg import EdgeSet, as_array, as_symmetric

FLOAT_FMT = "%.17g"


def _is_mm(path: Path) -> bool:
    return path.suffix.lower() in (".mtx", ".mm")


def read_matrix(path) -> np.ndarray:
    """Read a square symmetric matrix from ``.csv`` or ``.mtx``."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    if _is_mm(path):
        return as_symmetric(_read_mm(path), path.name)
    try:
        A = np.loadtxt(path, delimiter=",", dtype=float, ndmin=2)
    except ValueError as exc:
        raise InputError(f"cannot parse {path}: {exc}") from None
    return as_symmetric(A, path.name)


def write_matrix(path, M) -> None:
    path = Path(path)
    A = as_array(M)
    if _is_mm(path):
        _write_mm(path, A)
    else:
        np.savetxt(path, A, delimiter=",", fmt=FLOAT_FMT)


def _write_mm(path: Path, A: np.ndarray) -> None:
    d = A.shape[0]
    rows, cols = np.tril_indices(d)
    vals = A[rows, cols]
    keep = (vals != 0) | (rows == cols)
    lines = [
        "%%MatrixMarket matrix coordinate real symmetric",
        f"{d} {d} {int(keep.sum())}",
    ]
    for r, c, v in zip(rows[keep], cols[keep], vals[keep]):
        lines.append(f"{r + 1} {c + 1} {FLOAT_FMT % v}")
    path.write_text("\n".join(lines) + "\n")


def _read_mm(path: Path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().lower().split()
        if len(header) < 5 or header[0] != "%%matrixmarket" or header[1] != "matrix":
            raise InputError(f"{path}: not a Matrix Market file")
        fmt, field, symmetry = header[2], header[3], header[4]
        if fmt != "coordinate" or field not in ("real", "double", "integer"):
            raise InputError(f"{path}: only real coordinate Matrix Market is supported")
        line = fh.readline()
        while line.startswith("%") or not line.strip():
            line = fh.readline()
        try:
            nr, nc, nnz = (int(x) for x in line.split())
            if nr != nc:
                raise InputError(f"{path}: matrix is not square")
            A = np.zeros((nr, nc))
            count = 0
            for line in fh:
                if not line.strip() or line.startswith("%"):
                    continue
                r, c, v = line.split()[:3]
                r, c = int(r) - 1, int(c) - 1
                A[r, c] = float(v)
                if symmetry == "symmetric":
                    A[c, r] = float(v)
                count += 1
        except (ValueError, IndexError) as exc:
            raise InputError(f"cannot parse {path}: {exc}") from None
    if count != nnz:
        raise InputError(f"{path}: expected {nnz} entries, found {count}")
    return A


def read_edges(path, dim: int) -> EdgeSet:
    """Read an edge list of 1-based ``i,j`` pairs (one per line)."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    pairs = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            try:
                i, j = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                raise InputError(f"{path}: bad edge line {row!r}") from None
            pairs.append((i - 1, j - 1))
    return EdgeSet.from_pairs(dim, pairs)


def write_edges(path, edges: EdgeSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for i, j in edges.one_based():
            w.writerow([i, j])


def read_samples(path) -> np.ndarray:
    """Read an ``n x d`` data matrix (rows are observations, no header)."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    try:
        X = np.loadtxt(path, delimiter=",", dtype=float, ndmin=2)
    except ValueError as exc:
        raise InputError(f"cannot parse {path}: {exc}") from None
    if not np.all(np.isfinite(X)):
        raise InputError(f"{path} has non-finite entries")
    return X
