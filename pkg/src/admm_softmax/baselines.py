"""Comparison optimizers for the regularized softmax objective: Newton-CG,
limited-memory BFGS and minibatch SGD with Nesterov momentum.

The ``minimize_*`` functions work on any smooth objective given as
``fun(x) -> (value, gradient)``; the MLR drivers wrap them with history
recording, time budgets and best-validation tracking.
"""

import logging
import warnings
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.optimize

from .errors import DivergenceDetected, LineSearchFailure
from .history import ProgressRecord, Stopwatch, TrainHistory
from .linalg import jacobi_preconditioner, pcg_solve
from .model import MlrHessian, accuracy, misfit, mlr_objective

log = logging.getLogger(__name__)

ARMIJO_C = 1e-4
MAX_HALVINGS = 30
CURVATURE_SKIP = 1e-12


@dataclass
class OptimizerConfig:
    kind: str
    max_iter: int = 100              # Newton / quasi-Newton iterations, or SGD epochs
    cg_max_iter: int = 20
    cg_tol: float = 1e-2
    cg_precond: str = "none"         # "none" or "jacobi"
    lbfgs_memory: int = 10
    line_search: str = "armijo"      # "armijo" or "wolfe" (lbfgs only)
    wolfe_c2: float = 0.9
    batch_size: int = 300
    learning_rate: float = 1e-1
    momentum: float = 0.9
    lr_decay: float = 1.0
    grad_tol: float = 0.0
    time_budget: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("newton-cg", "lbfgs", "sgd"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.max_iter < 0 or self.cg_max_iter < 1 or self.batch_size < 1 or self.lbfgs_memory < 0:
            raise ValueError("iteration counts, batch size and memory must be positive")
        if self.kind == "sgd" and not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive for sgd")
        if self.line_search not in ("armijo", "wolfe"):
            raise ValueError(f"unknown line search {self.line_search!r}")
        if self.cg_precond not in ("none", "jacobi"):
            raise ValueError(f"unknown CG preconditioner {self.cg_precond!r}")


def armijo(fun, x, f0, g, p, c=ARMIJO_C, max_halvings=MAX_HALVINGS):
    """Backtracking from a unit step, halving until sufficient decrease.

    Returns ``(t, x_new, f_new, g_new)``. A roundoff-sized slack on the
    decrease test lets steps through once ``f`` stops resolving the change.
    """
    slope = float(np.vdot(g, p))
    if slope >= 0:
        raise LineSearchFailure(f"not a descent direction (slope {slope:.3e})")
    slack = 10 * np.finfo(float).eps * abs(f0)
    t = 1.0
    for _ in range(max_halvings + 1):
        x_new = x + t * p
        f_new, g_new = fun(x_new)
        if np.isfinite(f_new) and f_new <= f0 + c * t * slope + slack:
            return t, x_new, f_new, g_new
        t *= 0.5
    raise LineSearchFailure(f"Armijo line search failed after {max_halvings} halvings")


class _Stop(Exception):
    pass


def minimize_newton_cg(fun, hessian_at, x0, max_iter=100, cg_max_iter=20, cg_tol=1e-2,
                       grad_tol=0.0, precond_at=None, callback=None):
    """Truncated Newton: CG on ``H p = -g`` then an Armijo step.

    ``hessian_at(x)`` returns a callable applying the Hessian at ``x``;
    ``precond_at(x)``, if given, returns a preconditioner callable.
    ``callback(k, x, f, g, info)`` runs after each iteration and may return
    True to stop. Returns ``(x, f, g, info)`` where ``info`` has the CG
    diagnostics per Newton iteration.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    info = {"cg_iterations": [], "cg_final_residual": [], "cg_traces": [], "iterations": 0}
    for k in range(max_iter):
        if np.linalg.norm(g) <= grad_tol:
            break
        H = hessian_at(x)
        M = precond_at(x) if precond_at is not None else None
        res = pcg_solve(H, -g, tol=cg_tol, max_iter=cg_max_iter, precond=M)
        info["cg_iterations"].append(res.iterations)
        info["cg_final_residual"].append(res.residuals[-1])
        info["cg_traces"].append(list(res.residuals))
        _, x, f, g = armijo(fun, x, f, g, res.x)
        info["iterations"] = k + 1
        if callback is not None and callback(k + 1, x, f, g, info):
            break
    return x, f, g, info


def _two_loop(g, pairs, gamma):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * np.vdot(s, q)
        alphas.append(a)
        q -= a * y
    r = gamma * q
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * np.vdot(y, r)
        r += (a - b) * s
    return r


def minimize_lbfgs(fun, x0, memory=10, max_iter=100, grad_tol=0.0, line_search="armijo",
                   wolfe_c2=0.9, callback=None):
    """Limited-memory BFGS with the two-loop recursion.

    Curvature pairs with ``s^T y <= 1e-12 ||s|| ||y||`` are skipped. The
    initial inverse Hessian is ``gamma I`` with ``gamma = s^T y / y^T y`` of
    the newest pair. ``memory=0`` gives steepest descent.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    pairs = deque(maxlen=memory) if memory > 0 else deque(maxlen=0)
    gamma = 1.0
    info = {"iterations": 0, "skipped_pairs": 0}
    for k in range(max_iter):
        if np.linalg.norm(g) <= grad_tol:
            break
        p = -_two_loop(g, list(pairs), gamma) if pairs else -g
        if line_search == "wolfe":
            shape = x.shape
            with warnings.catch_warnings():
                # a failed search falls back to Armijo below
                warnings.simplefilter("ignore", RuntimeWarning)
                res = scipy.optimize.line_search(
                    lambda v: fun(v.reshape(shape))[0], lambda v: fun(v.reshape(shape))[1].ravel(),
                    x.ravel(), p.ravel(), gfk=g.ravel(), old_fval=f, c1=ARMIJO_C, c2=wolfe_c2)
            t = res[0]
            if t is None:
                t, x_new, f_new, g_new = armijo(fun, x, f, g, p)
            else:
                x_new = x + t * p
                f_new, g_new = fun(x_new)
        else:
            t, x_new, f_new, g_new = armijo(fun, x, f, g, p)
        s = x_new - x
        y = g_new - g
        sy = float(np.vdot(s, y))
        if memory > 0:
            if sy > CURVATURE_SKIP * np.linalg.norm(s) * np.linalg.norm(y):
                pairs.append((s, y, 1.0 / sy))
                gamma = sy / float(np.vdot(y, y))
            else:
                info["skipped_pairs"] += 1
        x, f, g = x_new, f_new, g_new
        info["iterations"] = k + 1
        if callback is not None and callback(k + 1, x, f, g, info):
            break
    return x, f, g, info


class _Tracker:
    """Records progress rows, enforces the time budget and keeps the best-validation W."""

    def __init__(self, data, val_data, reg, clock, callback, history):
        self.data, self.val, self.reg = data, val_data, reg
        self.has_val = val_data is not None and val_data.n_examples > 0
        self.clock, self.callback, self.history = clock, callback, history
        self.best_W, self.best_acc = None, -np.inf

    def record(self, it, W, objective=None):
        if objective is None:
            objective = mlr_objective(W, self.data, self.reg)[0]
        rec = ProgressRecord(
            it, self.clock.elapsed(), misfit(W, self.data), accuracy(W, self.data),
            misfit(W, self.val) if self.has_val else float("nan"),
            accuracy(W, self.val) if self.has_val else float("nan"),
            objective=float(objective))
        self.history.append(rec)
        if self.callback is not None:
            self.callback(rec)
        if self.best_W is None or (self.has_val and rec.val_acc > self.best_acc):
            self.best_W, self.best_acc = W.copy(), rec.val_acc
        if not self.has_val:
            self.best_W = W.copy()
        return rec

    def should_stop(self):
        return self.clock.expired()


def _initial_W(data, reg):
    if reg.Wref is not None:
        return reg.Wref.copy()
    return np.zeros((data.n_classes, data.n_features))


def newton_cg(data, val_data, reg, config: OptimizerConfig, callback: Optional[Callable] = None,
              W0=None):
    clock = Stopwatch(config.time_budget)
    hist = TrainHistory({"algorithm": "newton-cg", "alpha": reg.alpha,
                         "cg_max_iter": config.cg_max_iter, "cg_tol": config.cg_tol})
    tr = _Tracker(data, val_data, reg, clock, callback, hist)
    W = _initial_W(data, reg) if W0 is None else np.array(W0, dtype=np.float64)
    fun = lambda X: mlr_objective(X, data, reg)
    f0, _ = fun(W)
    tr.record(0, W, f0)
    precond_at = None
    if config.cg_precond == "jacobi":
        precond_at = lambda X: jacobi_preconditioner(MlrHessian(X, data, reg).diagonal())

    def cb(k, X, f, g, info):
        tr.record(k, X, f)
        return tr.should_stop()

    if not tr.should_stop() and config.max_iter > 0:
        W, f, g, info = minimize_newton_cg(
            fun, lambda X: MlrHessian(X, data, reg), W, max_iter=config.max_iter,
            cg_max_iter=config.cg_max_iter, cg_tol=config.cg_tol, grad_tol=config.grad_tol,
            precond_at=precond_at, callback=cb)
        hist.diagnostics.update(info)
    return tr.best_W, hist


def lbfgs(data, val_data, reg, config: OptimizerConfig, callback: Optional[Callable] = None,
          W0=None):
    clock = Stopwatch(config.time_budget)
    hist = TrainHistory({"algorithm": "lbfgs", "alpha": reg.alpha,
                         "memory": config.lbfgs_memory, "line_search": config.line_search})
    tr = _Tracker(data, val_data, reg, clock, callback, hist)
    W = _initial_W(data, reg) if W0 is None else np.array(W0, dtype=np.float64)
    fun = lambda X: mlr_objective(X, data, reg)
    tr.record(0, W)

    def cb(k, X, f, g, info):
        tr.record(k, X, f)
        return tr.should_stop()

    if not tr.should_stop() and config.max_iter > 0:
        W, f, g, info = minimize_lbfgs(
            fun, W, memory=config.lbfgs_memory, max_iter=config.max_iter,
            grad_tol=config.grad_tol, line_search=config.line_search,
            wolfe_c2=config.wolfe_c2, callback=cb)
        hist.diagnostics.update(info)
    return tr.best_W, hist


def minibatch_gradient(W, data, reg, index):
    """Gradient of the batch-fraction share of the objective, rescaled by the
    inverse batch fraction: mean loss over the batch plus the full regularizer."""
    D = data.D[:, index]
    C = data.C[:, index]
    Y = W @ D
    S = np.exp(Y - np.max(Y, axis=0))
    S /= S.sum(axis=0)
    return ((S - C) @ D.T) / len(index) + reg.value_and_grad(W)[1]


def sgd_nesterov(data, val_data, reg, config: OptimizerConfig,
                 callback: Optional[Callable] = None, W0=None):
    """Minibatch SGD with Nesterov momentum; one history row per epoch.

    Each epoch visits a seeded permutation of the examples. The update is
    ``V <- m V - lr grad(W + m V)``, ``W <- W + V``.
    """
    clock = Stopwatch(config.time_budget)
    hist = TrainHistory({"algorithm": "sgd", "alpha": reg.alpha, "seed": config.seed,
                         "batch_size": config.batch_size, "learning_rate": config.learning_rate,
                         "momentum": config.momentum, "lr_decay": config.lr_decay})
    tr = _Tracker(data, val_data, reg, clock, callback, hist)
    rng = np.random.default_rng(config.seed)
    W = _initial_W(data, reg) if W0 is None else np.array(W0, dtype=np.float64)
    V = np.zeros_like(W)
    f_init = tr.record(0, W).objective
    lr, mom, B, N = config.learning_rate, config.momentum, config.batch_size, data.n_examples
    for epoch in range(1, config.max_iter + 1):
        if tr.should_stop():
            break
        perm = rng.permutation(N)
        for start in range(0, N, B):
            idx = perm[start:start + B]
            g = minibatch_gradient(W + mom * V, data, reg, idx)
            V = mom * V - lr * g
            W = W + V
        f = mlr_objective(W, data, reg)[0]
        if not np.isfinite(f) or f > 1e3 * f_init:
            raise DivergenceDetected(
                f"objective {f:.3e} exceeds 1000x its initial value {f_init:.3e} "
                f"after epoch {epoch}; lower the learning rate")
        tr.record(epoch, W, f)
        lr *= config.lr_decay
    return tr.best_W, hist


def run_baseline(data, val_data, reg, config, callback=None):
    fn = {"newton-cg": newton_cg, "lbfgs": lbfgs, "sgd": sgd_nesterov}[config.kind]
    return fn(data, val_data, reg, config, callback)
