"""Shared data model for incomplete matrices, seeding, metrics and CSV I/O.

Everything in the toolkit consumes a p x n data matrix together with a 0/1
observation mask. Missing entries carry NaN in memory so that any code path
that bypasses the mask poisons its output instead of silently reading garbage.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray


@dataclass(frozen=True)
class SeedSpec:
    """Seed plus substream id; equal (seed, stream_id) gives identical draws."""

    seed: int
    stream_id: int = 0

    def rng(self) -> np.random.Generator:
        return np.random.default_rng([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream_id])

    def substream(self, offset: int) -> "SeedSpec":
        return SeedSpec(self.seed, self.stream_id + offset)


class IncompleteMatrix:
    """A p x n value matrix with a 0/1 mask (1 = observed).

    Entries where mask == 0 are stored as NaN and must never be consumed by
    numerics; all operations index through the mask.
    """

    def __init__(self, values: NDArray, mask: NDArray):
        values = np.asarray(values, dtype=float)
        mask = np.asarray(mask)
        if values.ndim != 2:
            raise ValueError("values must be a 2-D matrix")
        if values.shape != mask.shape:
            raise ValueError(
                f"shape mismatch: values {values.shape} vs mask {mask.shape}"
            )
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("mask entries must be exactly 0 or 1")
        mask = mask.astype(np.int8)
        values = values.copy()
        values[mask == 0] = np.nan  # poison the sentinel positions
        if np.isnan(values[mask == 1]).any():
            raise ValueError("observed entries must be finite numbers, got NaN")
        self.values = values
        self.mask = mask
        self.values.setflags(write=False)
        self.mask.setflags(write=False)

    @property
    def p(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def n_missing(self) -> int:
        return int((self.mask == 0).sum())

    def filled(self, fill_value: float = 0.0) -> NDArray:
        """Copy of values with missing entries replaced by fill_value."""
        out = self.values.copy()
        out[self.mask == 0] = fill_value
        return out

    @classmethod
    def from_complete(cls, values: NDArray) -> "IncompleteMatrix":
        values = np.asarray(values, dtype=float)
        return cls(values, np.ones_like(values, dtype=np.int8))

    def __repr__(self) -> str:
        return f"IncompleteMatrix(p={self.p}, n={self.n}, missing={self.n_missing()})"


@dataclass(frozen=True)
class ColumnSplit:
    """Observed/missing row indices of one column plus its observed values."""

    observed_idx: NDArray
    missing_idx: NDArray
    x_o: NDArray

    @property
    def n_observed(self) -> int:
        return len(self.observed_idx)

    @property
    def n_missing(self) -> int:
        return len(self.missing_idx)


def split_column(X: IncompleteMatrix, j: int) -> ColumnSplit:
    """Split column j of X into observed and missing parts (ascending indices)."""
    if not 0 <= j < X.n:
        raise IndexError(f"column index {j} out of range [0, {X.n})")
    col_mask = X.mask[:, j]
    observed = np.flatnonzero(col_mask == 1)
    missing = np.flatnonzero(col_mask == 0)
    return ColumnSplit(observed, missing, X.values[observed, j].copy())


def rmse_missing(Xhat: NDArray, Xtrue: NDArray, M: NDArray) -> float:
    """Root mean squared error over the masked (M == 0) entries only."""
    Xhat = np.asarray(Xhat, dtype=float)
    Xtrue = np.asarray(Xtrue, dtype=float)
    M = np.asarray(M)
    if not (Xhat.shape == Xtrue.shape == M.shape):
        raise ValueError("Xhat, Xtrue and M must share one shape")
    hole = M == 0
    if not hole.any():
        raise ValueError("empty evaluation set: no masked entries")
    diff = Xhat[hole] - Xtrue[hole]
    return float(np.sqrt(np.mean(diff**2)))


def sep(U_hat: NDArray, U_true: NDArray) -> float:
    """Normalized subspace estimation error in [0, 1].

    Computes tr(U_true^T (I - P_hat) U_true) / r where P_hat projects onto
    span(U_hat); 0 iff the two r-dimensional subspaces coincide, 1 when they
    are orthogonal. Invariant to the basis chosen for either span.
    """
    U_hat = np.asarray(U_hat, dtype=float)
    U_true = np.asarray(U_true, dtype=float)
    if U_hat.ndim != 2 or U_true.ndim != 2 or U_hat.shape != U_true.shape:
        raise ValueError("bases must be p x r matrices of equal shape")
    if U_hat.shape[1] > U_hat.shape[0]:
        raise ValueError("rank r cannot exceed the ambient dimension p")
    r = U_hat.shape[1]
    Qh = _orthonormalize(U_hat)
    Qt = _orthonormalize(U_true)
    C = Qt.T @ Qh
    val = (r - np.sum(C * C)) / r
    return float(min(max(val, 0.0), 1.0))


def _orthonormalize(U: NDArray) -> NDArray:
    q, rmat = np.linalg.qr(U)
    if np.min(np.abs(np.diag(rmat))) < 1e-12 * max(1.0, np.abs(rmat).max()):
        raise ValueError("rank-deficient basis")
    return q


# ---------------------------------------------------------------------------
# CSV format: one row per variable, missing entries are empty fields.
# ---------------------------------------------------------------------------


def read_matrix_csv(path, mask_path=None) -> IncompleteMatrix:
    """Read a p x n matrix CSV; empty fields mark missing entries.

    If mask_path is given, the sidecar 0/1 mask overrides the empty-field
    convention (entries masked out are dropped even if a value is present).
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n").rstrip("\r") for line in fh]
    while lines and lines[-1].strip() == "":
        lines.pop()  # trailing blank lines only; interior empties are data
    rows = [
        [float(tok) if tok.strip() else np.nan for tok in line.split(",")]
        for line in lines
    ]
    if not rows:
        raise ValueError(f"no data rows in {path}")
    width = {len(r) for r in rows}
    if len(width) != 1:
        raise ValueError(f"ragged CSV rows in {path}")
    values = np.array(rows, dtype=float)
    if mask_path is not None:
        mask = np.loadtxt(mask_path, delimiter=",", dtype=float, ndmin=2)
        values = np.where(np.asarray(mask) == 1, values, np.nan)
    else:
        mask = (~np.isnan(values)).astype(np.int8)
    return IncompleteMatrix(np.nan_to_num(values, nan=0.0), mask)


def write_matrix_csv(path, X, mask=None) -> None:
    """Write a matrix CSV; NaN or mask==0 entries become empty fields."""
    X = np.asarray(X, dtype=float)
    if mask is None:
        mask = ~np.isnan(X)
    else:
        mask = np.asarray(mask) == 1
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(X.shape[0]):
            fields = [
                format_float(X[i, j]) if mask[i, j] else ""
                for j in range(X.shape[1])
            ]
            fh.write(",".join(fields) + "\n")


def write_mask_csv(path, mask) -> None:
    mask = np.asarray(mask).astype(int)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in mask:
            fh.write(",".join(str(int(v)) for v in row) + "\n")


def format_float(x: float) -> str:
    """Shortest decimal string that round-trips a float64 exactly."""
    return repr(float(x))
