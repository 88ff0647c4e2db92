"""Streaming subspace tracking with missing entries.

The plain tracker keeps one recursive-least-squares precision matrix per row
of the subspace basis and performs second-order row updates with exponential
forgetting. The robust variant first splits each observation into a subspace
component and a sparse outlier vector, then updates the basis only on the
rows the outlier stage left clean.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .core import SeedSpec

PRECISION_INIT = 1e3
CONDITION_CAP = 1e12
OUTLIER_SUPPORT_TOL = 1e-10


@dataclass
class TrackerState:
    U: NDArray
    row_prec: NDArray  # (p, r, r) inverse correlation matrices
    lambda_forget: float
    t: int = 0
    reinit_count: int = 0

    @property
    def p(self) -> int:
        return self.U.shape[0]

    @property
    def r(self) -> int:
        return self.U.shape[1]


@dataclass(frozen=True)
class RobustConfig:
    rho: float = 1.0
    admm_iters: int = 50
    admm_tol: float = 1e-6
    alpha_reg: float = 0.0

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.alpha_reg < 0:
            raise ValueError("alpha_reg must be nonnegative")


@dataclass
class Stage1Result:
    w: NDArray
    s: NDArray
    converged: bool
    objective_trace: NDArray


def petrels_init(
    p: int, r: int, seed: SeedSpec = SeedSpec(0), lambda_forget: float = 0.98
) -> TrackerState:
    """Random orthonormal basis plus warm-start RLS precisions."""
    if not 1 <= r <= p:
        raise ValueError("need 1 <= r <= p")
    if not 0.0 < lambda_forget <= 1.0:
        raise ValueError("lambda_forget must lie in (0, 1]")
    rng = seed.rng()
    U, _ = np.linalg.qr(rng.standard_normal((p, r)))
    row_prec = np.tile(PRECISION_INIT * np.eye(r), (p, 1, 1))
    return TrackerState(U, row_prec, lambda_forget)


def petrels_weights(U: NDArray, y_t: NDArray, m_t: NDArray):
    """Least-squares weights on the observed rows; (w, underdetermined flag).

    Returns the minimum-norm solution when the observed system is rank
    deficient (including the all-masked case, which gives w = 0).
    """
    obs = np.flatnonzero(np.asarray(m_t) == 1)
    r = U.shape[1]
    if len(obs) == 0:
        return np.zeros(r), True
    A = U[obs]
    w, _res, rank, _sv = np.linalg.lstsq(A, np.asarray(y_t, dtype=float)[obs], rcond=None)
    return w, bool(rank < r)


def _rls_row_updates(state, obs, y_t, w, weight=1.0):
    """Weighted forgetting-RLS update of the observed rows of U.

    Precision recursion R_i <- lam * R_i + weight * w w^T applied in inverse
    form; rows whose inverse precision becomes ill-conditioned are reset to
    the warm start and counted.
    """
    lam = state.lambda_forget
    Rinv = state.row_prec[obs]
    v = Rinv @ w  # (k, r)
    denom = lam + weight * (v @ w)  # (k,)
    Rinv_new = (Rinv - weight * v[:, :, None] * v[:, None, :] / denom[:, None, None]) / lam
    resid = y_t[obs] - state.U[obs] @ w
    state.U[obs] += weight * resid[:, None] * (Rinv_new @ w)
    eig = np.linalg.eigvalsh(Rinv_new)
    bad = (eig[:, -1] > CONDITION_CAP * np.maximum(eig[:, 0], 1e-300)) | (eig[:, 0] <= 0)
    if bad.any():
        Rinv_new[bad] = PRECISION_INIT * np.eye(state.r)
        state.reinit_count += int(bad.sum())
    state.row_prec[obs] = Rinv_new
    state.t += 1
    return state


def petrels_update(state: TrackerState, y_t: NDArray, m_t: NDArray) -> TrackerState:
    """One tracking step: project on observed rows, then update those rows."""
    y_t = np.asarray(y_t, dtype=float)
    m_t = np.asarray(m_t)
    w, _flag = petrels_weights(state.U, y_t, m_t)
    obs = np.flatnonzero(m_t == 1)
    if len(obs) == 0:
        state.t += 1
        return state
    return _rls_row_updates(state, obs, y_t, w)


def robust_stage1(U: NDArray, y_t: NDArray, m_t: NDArray, cfg: RobustConfig) -> Stage1Result:
    """Alternating solve of the outlier-plus-weights objective.

    Minimizes ||m o (U w + s - y)||^2 + rho * ||s||_1 by exact block updates:
    least squares in w given s, entrywise soft-thresholding at rho / 2 in s
    given w. The objective is nonincreasing across iterations.
    """
    y_t = np.asarray(y_t, dtype=float)
    obs = np.flatnonzero(np.asarray(m_t) == 1)
    p, r = U.shape
    s = np.zeros(p)
    if len(obs) == 0:
        return Stage1Result(np.zeros(r), s, True, np.zeros(1))
    A = U[obs]
    pinv = np.linalg.pinv(A)
    y_o = y_t[obs]
    s_o = np.zeros(len(obs))
    trace = []
    converged = False
    for _ in range(cfg.admm_iters):
        w = pinv @ (y_o - s_o)
        resid = y_o - A @ w
        s_new = np.sign(resid) * np.maximum(np.abs(resid) - cfg.rho / 2.0, 0.0)
        obj = float(np.sum((A @ w + s_new - y_o) ** 2)) + cfg.rho * float(
            np.abs(s_new).sum()
        )
        trace.append(obj)
        delta = np.abs(s_new - s_o).max() if len(obs) else 0.0
        s_o = s_new
        if delta < cfg.admm_tol:
            converged = True
            break
    w = pinv @ (y_o - s_o)
    s[obs] = s_o
    return Stage1Result(w, s, converged, np.array(trace))


def robust_update(
    state: TrackerState, y_t: NDArray, m_t: NDArray, cfg: RobustConfig
) -> TrackerState:
    """Outlier-aware tracking step.

    Rows flagged by the sparse stage are removed from the mask; the remaining
    rows are updated with the per-step weight (observed fraction of the
    cleaned mask), and the row-norm penalty on U is applied as a clipping of
    the largest rows toward a common bound.
    """
    y_t = np.asarray(y_t, dtype=float)
    m_t = np.asarray(m_t)
    stage1 = robust_stage1(state.U, y_t, m_t, cfg)
    clean = (m_t == 1) & (np.abs(stage1.s) <= OUTLIER_SUPPORT_TOL)
    obs = np.flatnonzero(clean)
    if len(obs) == 0:
        state.t += 1
        return state
    weight = len(obs) / state.p
    state = _rls_row_updates(state, obs, y_t, stage1.w, weight=weight)
    if cfg.alpha_reg > 0:
        _clip_row_norms(state.U, cfg.alpha_reg / max(state.t, 1))
    return state


def _clip_row_norms(U, penalty):
    """Shrink the largest row norms to the bound solving the squared-max prox.

    The bound B minimizes 0.5 * sum_clipped (g_i - B)^2 + penalty / 2 * B^2
    over which rows are clipped, found by the usual water-filling scan over
    descending row norms g.
    """
    g = np.linalg.norm(U, axis=1)
    order = np.argsort(-g)
    gs = g[order]
    csum = np.cumsum(gs)
    bound = gs[0]
    for k in range(1, len(gs) + 1):
        b_k = csum[k - 1] / (penalty + k)
        if k == len(gs) or b_k >= gs[k]:
            bound = b_k
            break
    over = g > bound
    if over.any():
        scale = np.ones_like(g)
        scale[over] = bound / np.maximum(g[over], 1e-300)
        U *= scale[:, None]
