"""Softmax classifier, regularized cross-entropy objective and the per-example
subproblem solved inside the ADMM z-step."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, NonPositiveRho
from .linalg import as_operator_matrix

SIMPLEX_ATOL = 1e-12


@dataclass
class Dataset:
    """Features ``D`` (n_f x N), class probabilities ``C`` (n_c x N), labels (N,)."""

    D: np.ndarray
    C: np.ndarray
    labels: np.ndarray
    bias_appended: bool = False

    def __post_init__(self):
        self.D = np.asarray(self.D, dtype=np.float64)
        self.C = np.asarray(self.C, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.D.ndim != 2 or self.C.ndim != 2:
            raise DimensionMismatch("D and C must be 2-D")
        if self.D.shape[1] != self.C.shape[1] or self.labels.shape != (self.D.shape[1],):
            raise DimensionMismatch(
                f"example counts disagree: D {self.D.shape}, C {self.C.shape}, "
                f"labels {self.labels.shape}")
        if self.C.size:
            if self.C.min() < 0 or np.max(np.abs(self.C.sum(axis=0) - 1)) > SIMPLEX_ATOL:
                raise ValueError("columns of C must lie on the unit simplex")
        if self.bias_appended and self.D.shape[1] and not np.all(self.D[-1] == 1):
            raise ValueError("bias_appended is set but the last feature row is not all ones")

    @property
    def n_features(self):
        return self.D.shape[0]

    @property
    def n_classes(self):
        return self.C.shape[0]

    @property
    def n_examples(self):
        return self.D.shape[1]

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.D[:, index], self.C[:, index], self.labels[index], self.bias_appended)

    def empty_like(self):
        return self.subset(np.zeros(0, dtype=np.int64))


@dataclass
class RegularizerSpec:
    """Tikhonov term ``alpha/2 * ||L (W - Wref)^T||_F^2``.

    ``operator`` is a ``LaplacianOperator`` or any (sparse) square matrix acting
    on the feature dimension. ``Wref=None`` means the zero reference.
    """

    operator: object
    alpha: float
    Wref: Optional[np.ndarray] = None
    _L: object = field(init=False, repr=False)

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        self._L = as_operator_matrix(self.operator)

    @property
    def matrix(self):
        return self._L

    def offset(self, W):
        return W if self.Wref is None else W - self.Wref

    def value_and_grad(self, W):
        X = self._L @ self.offset(W).T
        value = 0.5 * self.alpha * float(np.vdot(X, X))
        grad = self.alpha * np.asarray(self._L.T @ X).T
        return value, grad

    def hessian_matvec(self, V):
        return self.alpha * np.asarray(self._L.T @ (self._L @ V.T)).T


def logsumexp(x, axis=0):
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def softmax(x, axis=0):
    """Shift-stabilized softmax along ``axis`` (columns by default)."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def _check_shapes(W, data, reg=None):
    if W.shape != (data.n_classes, data.n_features):
        raise DimensionMismatch(
            f"W has shape {W.shape}, data needs ({data.n_classes}, {data.n_features})")
    if reg is not None and reg.matrix.shape != (data.n_features, data.n_features):
        raise DimensionMismatch(
            f"regularization operator has shape {reg.matrix.shape}, "
            f"expected ({data.n_features}, {data.n_features})")
    if reg is not None and reg.Wref is not None and reg.Wref.shape != W.shape:
        raise DimensionMismatch("Wref and W shapes differ")


def misfit(W, data):
    """Mean cross-entropy ``1/N sum_j -c_j^T W d_j + logsumexp(W d_j)``."""
    if data.n_examples == 0:
        return float("nan")
    Y = W @ data.D
    return float((np.sum(logsumexp(Y)) - np.vdot(data.C, Y)) / data.n_examples)


def mlr_objective(W, data, reg):
    """Regularized cross-entropy and its gradient with respect to ``W``."""
    W = np.asarray(W, dtype=np.float64)
    _check_shapes(W, data, reg)
    N = data.n_examples
    if N == 0:
        raise ValueError("objective needs at least one example")
    Y = W @ data.D
    lse = logsumexp(Y)
    loss = (np.sum(lse) - np.vdot(data.C, Y)) / N
    S = np.exp(Y - lse)
    grad = ((S - data.C) @ data.D.T) / N
    r, rgrad = reg.value_and_grad(W)
    return float(loss + r), grad + rgrad


class MlrHessian:
    """Hessian action of ``mlr_objective`` at a fixed ``W``.

    Softmax probabilities are computed once so repeated products (as in CG)
    cost two matrix multiplications with ``D`` each.
    """

    def __init__(self, W, data, reg):
        W = np.asarray(W, dtype=np.float64)
        _check_shapes(W, data, reg)
        self.data = data
        self.reg = reg
        self.S = softmax(W @ data.D)

    def __call__(self, V):
        V = np.asarray(V, dtype=np.float64)
        if V.shape != (self.data.n_classes, self.data.n_features):
            raise DimensionMismatch(f"direction has shape {V.shape}")
        S = self.S
        Y = V @ self.data.D
        HY = S * Y - S * np.sum(S * Y, axis=0)
        return (HY @ self.data.D.T) / self.data.n_examples + self.reg.hessian_matvec(V)

    def diagonal(self):
        """Exact diagonal, for Jacobi preconditioning."""
        S = self.S
        D2 = self.data.D ** 2
        data_diag = ((S - S ** 2) @ D2.T) / self.data.n_examples
        L = self.reg.matrix
        lt_l_diag = np.asarray((L.multiply(L)).sum(axis=0)).ravel() if hasattr(L, "multiply") \
            else np.sum(np.asarray(L) ** 2, axis=0)
        return data_diag + self.reg.alpha * lt_l_diag[None, :]


def mlr_hessian_matvec(W, data, reg, V):
    return MlrHessian(W, data, reg)(V)


def zsub_objective(z, c, zref, rho):
    """Value, gradient and Hessian of the per-example z-step objective

        -c^T z + logsumexp(z) + rho/2 ||z - zref||^2.
    """
    if not rho > 0:
        raise NonPositiveRho(f"rho must be positive, got {rho}")
    z = np.asarray(z, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    zref = np.asarray(zref, dtype=np.float64)
    if not (z.shape == c.shape == zref.shape) or z.ndim != 1:
        raise DimensionMismatch("z, c and zref must be vectors of equal length")
    dz = z - zref
    value = -c @ z + logsumexp(z) + 0.5 * rho * (dz @ dz)
    s = softmax(z)
    grad = -c + s + rho * dz
    hess = np.diag(s) - np.outer(s, s) + rho * np.eye(z.size)
    return float(value), grad, hess


def predict(W, D):
    """Predicted class indices; ties resolve to the lowest index."""
    return np.argmax(W @ D, axis=0)


def accuracy(W, data):
    if data.n_examples == 0:
        return float("nan")
    return float(np.mean(predict(W, data.D) == data.labels))
