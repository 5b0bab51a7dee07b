"""Linear-algebra kernels: SPD factorization, conjugate gradients and the
discrete Laplacian used as the smoothness regularizer."""

import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import BreakdownDetected, DimensionMismatch, NotPositiveDefinite

log = logging.getLogger(__name__)

SYMMETRY_RTOL = 1e-10


@dataclass(frozen=True)
class SpdFactor:
    """Upper Cholesky factor ``R`` with ``A = R^T R``."""

    dimension: int
    upper: np.ndarray

    def solve(self, b):
        return spd_solve(self, b)

    def reconstruct(self):
        return self.upper.T @ self.upper


def spd_factorize(A, overwrite=False):
    """Cholesky-factorize a symmetric positive definite matrix.

    Small asymmetries (relative size up to ``1e-10``) are removed by averaging
    ``A`` with its transpose. Larger ones raise ``ValueError``.

    Args:
        A: square array.
        overwrite: allow ``A`` to be reused as workspace.

    Returns:
        SpdFactor

    Raises:
        NotPositiveDefinite: a pivot is non-positive or numerically zero.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {A.shape}")
    n = A.shape[0]
    if not overwrite:
        A = A.copy()
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")

    scale = np.max(np.abs(A)) if n else 0.0
    asym = np.max(np.abs(A - A.T)) if n else 0.0
    if asym > SYMMETRY_RTOL * max(scale, np.finfo(float).tiny):
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    if asym > 0:
        A += A.T
        A *= 0.5

    if n == 0:
        return SpdFactor(0, np.zeros((0, 0)))
    max_diag = float(np.max(np.diag(A)))
    try:
        R = scipy.linalg.cholesky(A, lower=False, overwrite_a=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"Cholesky failed: {exc}") from exc
    pivots = np.diag(R) ** 2
    # numerically zero pivots mean a singular matrix even when LAPACK succeeds
    if max_diag <= 0 or pivots.min() <= n * np.finfo(float).eps * max_diag:
        k = int(np.argmin(pivots))
        raise NotPositiveDefinite(
            f"non-positive pivot {pivots[k]:.3e} at index {k} (matrix numerically singular)"
        )
    return SpdFactor(n, R)


def spd_solve(factor, B):
    B = np.asarray(B, dtype=np.float64)
    if B.shape[0] != factor.dimension:
        raise DimensionMismatch(
            f"right-hand side has {B.shape[0]} rows, factor dimension is {factor.dimension}"
        )
    if factor.dimension == 0:
        return B.copy()
    return scipy.linalg.cho_solve((factor.upper, False), B, check_finite=False)


class PcgResult(NamedTuple):
    x: np.ndarray
    iterations: int
    residuals: list


def pcg_solve(apply_a: Callable, b, tol=1e-10, max_iter=None,
              precond: Optional[Callable] = None, x0=None) -> PcgResult:
    """Preconditioned conjugate gradients for ``A x = b``.

    ``b`` may have any shape; inner products are taken over all entries, so
    matrix-valued unknowns do not need flattening. Stops once
    ``||r|| <= tol * ||b||`` or after ``max_iter`` iterations.

    ``residuals`` holds the relative residual ``||r_k|| / ||b||`` for
    ``k = 0, ..., iterations``.
    """
    b = np.asarray(b, dtype=np.float64)
    if max_iter is None:
        max_iter = b.size
    bnorm = np.linalg.norm(b)
    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = np.array(x0, dtype=np.float64)
        r = b - apply_a(x)
    if bnorm == 0:
        return PcgResult(np.zeros_like(b), 0, [0.0])

    rel = [np.linalg.norm(r) / bnorm]
    if rel[-1] <= tol:
        return PcgResult(x, 0, rel)
    z = precond(r) if precond is not None else r
    p = z.copy()
    rz = np.vdot(r, z)
    it = 0
    while it < max_iter:
        Ap = apply_a(p)
        curv = np.vdot(p, Ap)
        if not curv > 0:
            raise BreakdownDetected(f"non-positive curvature p'Ap = {curv:.3e} at CG step {it}")
        step = rz / curv
        x += step * p
        r -= step * Ap
        it += 1
        rel.append(np.linalg.norm(r) / bnorm)
        if rel[-1] > rel[-2]:
            log.debug("CG residual increased at step %d: %.3e -> %.3e", it, rel[-2], rel[-1])
        if rel[-1] <= tol:
            break
        z = precond(r) if precond is not None else r
        rz_new = np.vdot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return PcgResult(x, it, rel)


def jacobi_preconditioner(diagonal):
    inv = 1.0 / np.asarray(diagonal, dtype=np.float64)
    return lambda r: inv.reshape(r.shape) * r


@dataclass(frozen=True)
class LaplacianOperator:
    """Per-channel 5-point Laplacian on an image grid, zero-Neumann boundary.

    Coordinates are ordered channel-major, then row-major within a channel,
    with an optional trailing bias coordinate that gets an identity row.
    """

    grid_height: int
    grid_width: int
    channel_count: int
    includes_bias_row: bool
    matrix: sp.csr_matrix

    @property
    def size(self):
        return self.matrix.shape[0]

    def apply(self, x):
        """``L x`` summed as neighbour differences, so constants map to exact zeros.

        ``x`` has ``size`` rows and any number of columns.
        """
        x = np.asarray(x, dtype=np.float64)
        c, h, w = self.channel_count, self.grid_height, self.grid_width
        n = c * h * w
        img = x[:n].reshape((c, h, w) + x.shape[1:])
        out = np.zeros_like(img)
        dv = img[:, 1:] - img[:, :-1]
        out[:, :-1] += dv
        out[:, 1:] -= dv
        dh = img[:, :, 1:] - img[:, :, :-1]
        out[:, :, :-1] += dh
        out[:, :, 1:] -= dh
        out = out.reshape((n,) + x.shape[1:])
        if self.includes_bias_row:
            out = np.concatenate([out, x[n:]], axis=0)
        return out

    def normal_matrix(self):
        """``L^T L`` as a sparse matrix."""
        return (self.matrix.T @ self.matrix).tocsr()


def _path_laplacian(n):
    # graph Laplacian of a path: neighbours +1, centre -(number of neighbours)
    if n == 1:
        return sp.csr_matrix((1, 1))
    off = np.ones(n - 1)
    deg = np.full(n, 2.0)
    deg[0] = deg[-1] = 1.0
    return sp.diags([off, -deg, off], [-1, 0, 1], format="csr")


def build_laplacian(grid_height, grid_width, channel_count=1, includes_bias_row=False):
    if grid_height < 1 or grid_width < 1 or channel_count < 1:
        raise ValueError("grid dimensions and channel count must be positive")
    lap2d = (sp.kron(sp.identity(grid_height), _path_laplacian(grid_width))
             + sp.kron(_path_laplacian(grid_height), sp.identity(grid_width)))
    blocks = sp.kron(sp.identity(channel_count), lap2d)
    if includes_bias_row:
        blocks = sp.block_diag([blocks, sp.identity(1)])
    return LaplacianOperator(grid_height, grid_width, channel_count, includes_bias_row,
                             sp.csr_matrix(blocks, dtype=np.float64))


def as_operator_matrix(L):
    """Return the matrix behind a ``LaplacianOperator`` or pass a matrix through."""
    if isinstance(L, LaplacianOperator):
        return L.matrix
    return L
