"""Sparse direct factorizations (reused across many solves) and CG."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import IterationLimitError, SolverError


class Factorization:
    """Reusable sparse LU with a singularity guard.

    The factorization is immutable after construction; concurrent solves
    are safe. `check=True` verifies the relative residual against the
    1e-10 contract (costs one matvec).
    """

    def __init__(self, matrix: sp.spmatrix):
        self._matrix = matrix.tocsc()
        try:
            self._lu = spla.splu(self._matrix)
        except RuntimeError as exc:  # "Factor is exactly singular"
            raise SolverError(f"sparse factorization failed: {exc}") from exc
        diag = np.abs(self._lu.U.diagonal())
        if diag.size and diag.min() < 1e-13 * max(diag.max(), 1e-300):
            raise SolverError(
                f"matrix numerically singular (pivot ratio {diag.min() / diag.max():.2e})"
            )
        self.nnz = self._lu.nnz

    @property
    def shape(self):
        return self._matrix.shape

    def solve(self, rhs: np.ndarray, check: bool = False) -> np.ndarray:
        x = self._lu.solve(rhs)
        if check:
            nb = np.linalg.norm(rhs)
            if nb > 0:
                resid = np.linalg.norm(self._matrix @ x - rhs) / nb
                if resid > 1e-10:
                    raise SolverError(f"direct solve residual {resid:.2e} > 1e-10")
        return x


def factorize(matrix: sp.spmatrix) -> Factorization:
    return Factorization(matrix)


def solve_spd(matrix, rhs: np.ndarray, check: bool = True) -> np.ndarray:
    """Solve a symmetric positive definite system.

    A direct factorization is preferred; if it runs out of memory the
    solve falls back to diagonally preconditioned CG with relative
    tolerance 1e-10 and at most 10*n iterations.
    """
    if isinstance(matrix, Factorization):
        return matrix.solve(rhs, check=check)
    try:
        return Factorization(matrix).solve(rhs, check=check)
    except MemoryError:
        diag = matrix.diagonal()
        if np.any(diag <= 0):
            raise SolverError("matrix not positive definite (nonpositive diagonal)")
        inv_d = 1.0 / diag
        x, _ = conjugate_gradient(lambda v: matrix @ v, rhs, rtol=1e-10,
                                  maxiter=10 * matrix.shape[0],
                                  precondition=lambda r: inv_d * r)
        return x


def conjugate_gradient(apply_op, rhs: np.ndarray, x0: np.ndarray | None = None,
                       rtol: float = 1e-8, maxiter: int = 500,
                       precondition=None):
    """Preconditioned CG on an SPD operator given as a callable.

    Stops when ||rhs - A x|| <= rtol * ||rhs||. Returns (x, iterations);
    raises IterationLimitError (carrying the final relative residual) on
    non-convergence.
    """
    norm_b = np.linalg.norm(rhs)
    if norm_b == 0.0:
        return np.zeros_like(rhs), 0
    x = np.zeros_like(rhs) if x0 is None else x0.copy()
    r = rhs - apply_op(x) if x0 is not None else rhs.copy()
    if np.linalg.norm(r) <= rtol * norm_b:
        return x, 0
    z = precondition(r) if precondition else r
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, maxiter + 1):
        ap = apply_op(p)
        alpha = rz / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        if np.linalg.norm(r) <= rtol * norm_b:
            return x, it
        z = precondition(r) if precondition else r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise IterationLimitError(
        f"CG did not reach rtol={rtol:g} in {maxiter} iterations "
        f"(residual {np.linalg.norm(r) / norm_b:.3e})",
        residual=float(np.linalg.norm(r) / norm_b),
        iterations=maxiter,
    )
