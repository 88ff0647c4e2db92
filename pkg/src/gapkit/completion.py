"""Low-rank matrix completion: fixed-rank hard-impute and nuclear-norm
soft-impute, both pinning observed entries on every pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .core import IncompleteMatrix


@dataclass
class HardImputeResult:
    X: NDArray
    iters: int
    converged: bool


@dataclass
class SoftImputeResult:
    X: NDArray
    rank: int
    objective_trace: NDArray
    iters: int
    converged: bool


def _default_init(Y: IncompleteMatrix) -> NDArray:
    from .imputation import impute_mean

    return impute_mean(Y)


def hard_impute(
    Y: IncompleteMatrix,
    r: int,
    tol: float = 1e-6,
    max_iter: int = 500,
    init: NDArray | None = None,
) -> HardImputeResult:
    """Alternate a rank-r truncated SVD with re-pinning of observed entries.

    Starting from the mean imputation, each pass replaces the missing entries
    with the rank-r SVD reconstruction while observed entries stay equal to
    Y; stops when the relative Frobenius change of the iterate drops below
    tol.
    """
    if not 1 <= r <= min(Y.p, Y.n):
        raise ValueError(f"rank r={r} must lie in [1, min(p, n)]")
    obs = Y.mask == 1
    cur = np.array(init, dtype=float) if init is not None else _default_init(Y)
    if cur.shape != Y.shape:
        raise ValueError("init shape mismatch")
    cur = np.where(obs, Y.filled(0.0), cur)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        U, s, Vt = np.linalg.svd(cur, full_matrices=False)
        Z = (U[:, :r] * s[:r]) @ Vt[:r]
        new = np.where(obs, Y.filled(0.0), Z)
        change = np.linalg.norm(new - cur) / max(np.linalg.norm(cur), 1e-300)
        cur = new
        if change < tol:
            converged = True
            break
    return HardImputeResult(cur, it, converged)


def soft_impute(
    Y: IncompleteMatrix,
    lam: float,
    tol: float = 1e-6,
    max_iter: int = 500,
    init: NDArray | None = None,
) -> SoftImputeResult:
    """Proximal iteration for the nuclear-norm completion objective.

    Each pass soft-thresholds the singular values of the observed-pinned
    matrix by lam; the objective 0.5 * ||M o (X - Y)||_F^2 + lam * ||X||_* is
    recorded at every iterate and is nonincreasing.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    obs = Y.mask == 1
    Yobs = Y.filled(0.0)
    Z = np.array(init, dtype=float) if init is not None else _default_init(Y)
    if Z.shape != Y.shape:
        raise ValueError("init shape mismatch")
    trace = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        pinned = np.where(obs, Yobs, Z)
        U, s, Vt = np.linalg.svd(pinned, full_matrices=False)
        s_shrunk = np.maximum(s - lam, 0.0)
        Z_new = (U * s_shrunk) @ Vt
        trace.append(
            0.5 * float(np.sum((Z_new[obs] - Yobs[obs]) ** 2)) + lam * s_shrunk.sum()
        )
        change = np.linalg.norm(Z_new - Z) / max(np.linalg.norm(Z), 1e-300)
        Z = Z_new
        if change < tol:
            converged = True
            break
    tiny = 1e-12 * max(float(s[0]) if len(s) else 0.0, 1.0)
    rank = int(np.sum(s_shrunk > tiny))
    return SoftImputeResult(Z, rank, np.array(trace), it, converged)


def nuclear_objective(X: NDArray, Y: NDArray, M: NDArray, lam: float) -> float:
    """0.5 * ||M o (X - Y)||_F^2 + lam * ||X||_* with a full SVD."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    M = np.asarray(M)
    if not (X.shape == Y.shape == M.shape):
        raise ValueError("X, Y and M must share one shape")
    resid = np.where(M == 1, X - Y, 0.0)
    return 0.5 * float(np.sum(resid**2)) + lam * float(
        np.linalg.svd(X, compute_uv=False).sum()
    )
