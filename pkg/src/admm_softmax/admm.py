"""ADMM-Softmax: alternating W least-squares solves, independent per-example
z problems and a scaled dual update.

The split problem is

    min  1/N sum_j [-c_j^T z_j + logsumexp(z_j)] + alpha/2 ||L (W - Wref)^T||_F^2
    s.t. z_j = W d_j

using the augmented Lagrangian ``1/N sum_j [loss_j + y_j^T r_j + rho/2 ||r_j||^2]``
with ``r_j = z_j - W d_j``. Each z_j then minimizes
``zsub_objective(z, c_j, W d_j - u_j, rho)`` and, after multiplying the W-step
by N, the W-step normal equations are

    (rho D D^T + N alpha L^T L) W^T = rho D (Z + U)^T + N alpha L^T L Wref^T.

The N in front of alpha keeps the minimizer identical to that of
``mlr_objective`` with the same ``alpha``.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DimensionMismatch, LineSearchFailure, NotPositiveDefinite
from .history import ProgressRecord, Stopwatch, TrainHistory
from .linalg import SpdFactor, spd_factorize, spd_solve
from .model import Dataset, RegularizerSpec, accuracy, logsumexp, misfit

log = logging.getLogger(__name__)

ARMIJO_C = 1e-4
MAX_HALVINGS = 30
DIRECT_SOLVE_MAX_CLASSES = 64


@dataclass
class AdmmConfig:
    reg: RegularizerSpec
    rho: float = 1e-7
    eps_abs: float = 1e-6
    eps_rel: float = 1e-4
    max_iter: int = 100
    z_newton_max_iter: int = 100
    z_newton_grad_tol: float = 1e-8
    inner_cg_max_iter: int = 50
    inner_cg_tol: float = 1e-8
    z_solver: str = "auto"          # "direct", "cg" or "auto"
    time_budget: Optional[float] = None
    init: str = "reference"         # "reference" or "random"
    init_scale: float = 1e-3
    seed: int = 0
    n_workers: int = 1
    use_stopping: bool = True

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not (self.eps_abs > 0 and self.eps_rel > 0):
            raise ValueError("stopping tolerances must be positive")
        if self.z_solver not in ("direct", "cg", "auto"):
            raise ValueError(f"unknown z_solver {self.z_solver!r}")
        if self.init not in ("reference", "random"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class AdmmState:
    W: np.ndarray
    Z: np.ndarray
    U: np.ndarray
    iter: int = 0
    primal_residual: float = float("inf")
    dual_residual: float = float("inf")

    def copy(self):
        return AdmmState(self.W.copy(), self.Z.copy(), self.U.copy(), self.iter,
                         self.primal_residual, self.dual_residual)


@dataclass
class WSystemFactor:
    """Cholesky factor of ``A = rho D D^T + N alpha L^T L`` and the constant part
    ``N alpha L^T L Wref^T`` of the right-hand side."""

    factor: SpdFactor
    constant_rhs: np.ndarray
    D: np.ndarray
    rho: float
    alpha: float
    factor_seconds: float = 0.0

    def apply_matrix(self, x):
        R = self.factor.upper
        return R.T @ (R @ x)

    def solve(self, B):
        return spd_solve(self.factor, B)


def gram_matrix(D):
    return D @ D.T


def initial_state(data, config):
    reg = config.reg
    W = np.zeros((data.n_classes, data.n_features)) if reg.Wref is None else reg.Wref.copy()
    if config.init == "random":
        rng = np.random.default_rng(config.seed)
        W = W + config.init_scale * rng.standard_normal(W.shape)
    return AdmmState(W, W @ data.D, np.zeros((data.n_classes, data.n_examples)))


def precompute_w_system(data, config, gram=None):
    """Form and factor the iteration-independent W-step matrix.

    ``gram`` (``D D^T``) may be passed in to share it between runs that only
    differ in ``rho`` or ``alpha``.
    """
    sw = Stopwatch()
    reg = config.reg
    n_f = data.n_features
    if reg.matrix.shape != (n_f, n_f):
        raise DimensionMismatch(f"regularization operator has shape {reg.matrix.shape}, "
                                f"expected ({n_f}, {n_f})")
    if gram is None:
        A = gram_matrix(data.D)
        A *= config.rho
    else:
        A = config.rho * gram
    LtL = (reg.matrix.T @ reg.matrix)
    reg_weight = data.n_examples * reg.alpha
    if reg_weight > 0:
        if hasattr(LtL, "tocoo"):
            coo = LtL.tocoo()
            coo.sum_duplicates()
            A[coo.row, coo.col] += reg_weight * coo.data
        else:
            A += reg_weight * np.asarray(LtL)
    try:
        factor = spd_factorize(A, overwrite=True)
    except NotPositiveDefinite as exc:
        raise NotPositiveDefinite(
            f"W-system matrix rho*D*D^T + N*alpha*L^T*L is not positive definite "
            f"(rho={config.rho:g}, alpha={reg.alpha:g}); increase alpha. {exc}") from exc
    if reg.Wref is None or reg_weight == 0:
        const = np.zeros((n_f, data.n_classes))
    else:
        const = reg_weight * np.asarray(LtL @ reg.Wref.T)
    return WSystemFactor(factor, const, data.D, config.rho, reg.alpha, sw.elapsed())


def w_update(state, sys):
    if state.Z.shape != state.U.shape or state.Z.shape[1] != sys.D.shape[1]:
        raise DimensionMismatch("Z, U and D are not conformal")
    rhs = sys.rho * (sys.D @ (state.Z + state.U).T) + sys.constant_rhs
    return sys.solve(rhs).T


# -- z-step ---------------------------------------------------------------
# Rows of the arrays below are examples; every operation is row-local so a
# row's result does not depend on which other rows share its batch.

def _zsub_values(z, c, zref, rho, with_scale=False):
    dz = z - zref
    lse = logsumexp(z, axis=1)
    cz = np.sum(c * z, axis=1)
    quad = 0.5 * rho * np.sum(dz * dz, axis=1)
    value = lse - cz + quad
    if with_scale:
        # magnitude of the cancelling terms, for roundoff-aware comparisons
        return value, np.abs(lse) + np.abs(cz) + quad
    return value


def _row_softmax(z):
    e = np.exp(z - np.max(z, axis=1, keepdims=True))
    return e / np.sum(e, axis=1, keepdims=True)


def _batched_cg(s, rho, b, max_iter, tol):
    """CG on H_j x_j = b_j with H_j = diag(s_j) - s_j s_j^T + rho I, row by row."""
    def hv(v):
        return s * v - s * np.sum(s * v, axis=1, keepdims=True) + rho * v

    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = np.sum(r * r, axis=1)
    bnorm = np.sqrt(rr)
    active = np.sqrt(rr) > tol * bnorm
    for _ in range(max_iter):
        if not active.any():
            break
        Ap = hv(p)
        step = np.where(active, rr / np.where(active, np.sum(p * Ap, axis=1), 1.0), 0.0)
        x += step[:, None] * p
        r -= step[:, None] * Ap
        rr_new = np.sum(r * r, axis=1)
        beta = np.where(active, rr_new / np.where(rr > 0, rr, 1.0), 0.0)
        p = np.where(active[:, None], r + beta[:, None] * p, p)
        rr = np.where(active, rr_new, rr)
        active = active & (np.sqrt(rr) > tol * bnorm)
    return x


def solve_zsub_batch(z0, c, zref, rho, grad_tol=1e-8, max_iter=100, solver="direct",
                     cg_max_iter=50, cg_tol=1e-8, row_offset=0):
    """Newton with Armijo backtracking for a batch of z-subproblems.

    Arrays are (m, n_c) with one example per row. Rows whose gradient norm is
    already below ``grad_tol`` are left untouched.
    """
    z = np.array(z0, dtype=np.float64)
    m, n_c = z.shape
    active = np.ones(m, dtype=bool)
    eye = np.eye(n_c)
    for _ in range(max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        zi, ci, ri = z[idx], c[idx], zref[idx]
        s = _row_softmax(zi)
        g = s - ci + rho * (zi - ri)
        still = np.sqrt(np.sum(g * g, axis=1)) > grad_tol
        active[idx[~still]] = False
        if not still.any() or _ == max_iter:
            break
        idx, zi, ci, ri, s, g = idx[still], zi[still], ci[still], ri[still], s[still], g[still]

        if solver == "cg":
            p = _batched_cg(s, rho, -g, cg_max_iter, cg_tol)
        else:
            H = s[:, :, None] * eye - s[:, :, None] * s[:, None, :] + rho * eye
            p = np.linalg.solve(H, -g[:, :, None])[:, :, 0]

        f0, fscale = _zsub_values(zi, ci, ri, rho, with_scale=True)
        slope = np.sum(g * p, axis=1)
        t = np.ones(idx.size)
        pending = np.ones(idx.size, dtype=bool)
        znew = zi.copy()
        slack = 10 * np.finfo(float).eps * fscale
        for _h in range(MAX_HALVINGS + 1):
            pi = np.flatnonzero(pending)
            trial = zi[pi] + t[pi, None] * p[pi]
            ft = _zsub_values(trial, ci[pi], ri[pi], rho)
            ok = ft <= f0[pi] + ARMIJO_C * t[pi] * slope[pi] + slack[pi]
            znew[pi[ok]] = trial[ok]
            pending[pi[ok]] = False
            if not pending.any():
                break
            t[pending] *= 0.5
        if pending.any():
            bad = int(idx[np.flatnonzero(pending)[0]]) + row_offset
            raise LineSearchFailure(
                f"z-step line search failed after {MAX_HALVINGS} halvings for example {bad}",
                index=bad)
        z[idx] = znew
    return z


def z_update(state, Wnew, data, config, WD=None):
    """Solve the N independent z-subproblems, warm-started at ``state.Z``."""
    if WD is None:
        WD = Wnew @ data.D
    zref = (WD - state.U).T
    c = data.C.T
    z0 = state.Z.T
    rho_z = config.rho
    solver = config.z_solver
    if solver == "auto":
        solver = "direct" if data.n_classes <= DIRECT_SOLVE_MAX_CLASSES else "cg"
    kw = dict(grad_tol=config.z_newton_grad_tol, max_iter=config.z_newton_max_iter,
              solver=solver, cg_max_iter=config.inner_cg_max_iter, cg_tol=config.inner_cg_tol)

    N = data.n_examples
    workers = max(1, min(config.n_workers, N))
    if workers == 1:
        Z = solve_zsub_batch(z0, c, zref, rho_z, **kw)
    else:
        bounds = np.linspace(0, N, workers + 1).astype(int)
        chunks = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(
                lambda b: solve_zsub_batch(z0[b[0]:b[1]], c[b[0]:b[1]], zref[b[0]:b[1]],
                                           rho_z, row_offset=b[0], **kw), chunks))
        Z = np.concatenate(parts, axis=0)
    return np.ascontiguousarray(Z.T)


def dual_update(state, Wnew, Znew, data, WD=None):
    if WD is None:
        WD = Wnew @ data.D
    if Znew.shape != WD.shape or state.U.shape != WD.shape:
        raise DimensionMismatch("U, Z and W D are not conformal")
    return state.U + (Znew - WD)


def residual_norms(state, Zprev, data, rho, WD=None, d_norms=None):
    """Primal and dual residual norms as sums of per-example norms.

    The dual term uses ``||vec(dz d^T)|| = ||dz|| ||d||``.
    """
    if WD is None:
        WD = state.W @ data.D
    if d_norms is None:
        d_norms = np.linalg.norm(data.D, axis=0)
    primal = float(np.sum(np.linalg.norm(state.Z - WD, axis=0)))
    dual = float(rho * np.sum(np.linalg.norm(state.Z - Zprev, axis=0) * d_norms))
    return primal, dual


def stopping_thresholds(state, data, config, WD=None):
    if WD is None:
        WD = state.W @ data.D
    base = np.sqrt(data.n_examples * data.n_classes) * config.eps_abs
    z_max = np.max(np.linalg.norm(state.Z, axis=0), initial=0.0)
    wd_max = np.max(np.linalg.norm(WD, axis=0), initial=0.0)
    u_max = np.max(np.linalg.norm(state.U, axis=0), initial=0.0)
    return base + config.eps_rel * max(z_max, wd_max), base + config.eps_rel * u_max


def stopping_satisfied(state, residuals, data, config, WD=None):
    eps_pri, eps_dual = stopping_thresholds(state, data, config, WD)
    primal, dual = residuals
    return bool(primal <= eps_pri and dual <= eps_dual)


def split_objective(W, Z, data, reg):
    """Objective of the constrained problem: loss at ``Z`` plus regularizer at ``W``."""
    loss = (np.sum(logsumexp(Z)) - np.vdot(data.C, Z)) / data.n_examples
    return float(loss + reg.value_and_grad(W)[0])


def run_admm(data: Dataset, val_data: Optional[Dataset], config: AdmmConfig,
             callback: Optional[Callable] = None, w_system: Optional[WSystemFactor] = None,
             gram=None, state: Optional[AdmmState] = None):
    """Train with ADMM-Softmax.

    Returns the weights with the best validation accuracy (the last iterate
    when ``val_data`` is empty) and the per-iteration history. The clock
    starts before factorization, so ``time_budget`` covers it.
    """
    clock = Stopwatch(config.time_budget)
    hist = TrainHistory({"algorithm": "admm", "rho": config.rho, "alpha": config.reg.alpha})
    if w_system is None:
        w_system = precompute_w_system(data, config, gram=gram)
    hist.diagnostics["factor_seconds"] = w_system.factor_seconds

    if state is None:
        state = initial_state(data, config)
    else:
        state = state.copy()
    has_val = val_data is not None and val_data.n_examples > 0
    d_norms = np.linalg.norm(data.D, axis=0)
    reg = config.reg

    def record(WD, mu=0.0, gamma=0.0):
        reg_val = reg.value_and_grad(state.W)[0]
        lse = logsumexp(WD)
        loss = float((np.sum(lse) - np.vdot(data.C, WD)) / data.n_examples)
        train_acc = float(np.mean(np.argmax(WD, axis=0) == data.labels))
        rec = ProgressRecord(
            state.iter, clock.elapsed(), loss, train_acc,
            misfit(state.W, val_data) if has_val else float("nan"),
            accuracy(state.W, val_data) if has_val else float("nan"),
            state.primal_residual if np.isfinite(state.primal_residual) else 0.0,
            state.dual_residual if np.isfinite(state.dual_residual) else 0.0,
            mu, gamma, loss + reg_val)
        hist.append(rec)
        if callback is not None:
            callback(rec)
        return rec

    WD = state.W @ data.D
    rec = record(WD)
    best_W, best_acc = state.W.copy(), rec.val_acc

    reason = "max_iter"
    while state.iter < config.max_iter:
        if clock.expired():
            reason = "time_budget"
            break
        W_prev, Z_prev = state.W, state.Z
        W_new = w_update(state, w_system)
        WD = W_new @ data.D
        Z_new = z_update(state, W_new, data, config, WD=WD)
        U_new = dual_update(state, W_new, Z_new, data, WD=WD)
        state = AdmmState(W_new, Z_new, U_new, state.iter + 1)
        state.primal_residual, state.dual_residual = residual_norms(
            state, Z_prev, data, config.rho, WD=WD, d_norms=d_norms)
        mu = float(np.linalg.norm(W_new - W_prev))
        gamma = float(np.max(np.linalg.norm(Z_new - Z_prev, axis=0), initial=0.0))
        rec = record(WD, mu, gamma)
        if has_val and rec.val_acc > best_acc:
            best_W, best_acc = state.W.copy(), rec.val_acc
        if config.use_stopping and stopping_satisfied(
                state, (state.primal_residual, state.dual_residual), data, config, WD=WD):
            reason = "converged"
            break

    hist.final_state = state
    hist.stop_reason = reason
    log.info("ADMM stopped after %d iterations (%s)", state.iter, reason)
    return (best_W if has_val else state.W.copy()), hist
