"""Sparse linear solvers: restarted GMRES, ILU(0), and a dense oracle.

Matrices are scipy CSR.  GMRES uses right preconditioning, so the
Givens-rotation residual estimate tracks the true unpreconditioned
residual; the reported achieved residual is nevertheless recomputed
from the returned solution.  ILU(0) is the zero-fill incomplete
factorization on the matrix's own sparsity pattern, with the inner
loops compiled by numba.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from numba import njit

logger = logging.getLogger(__name__)


class LinearSolveError(RuntimeError):
    """Linear solve failure; carries iteration count and residual."""

    def __init__(self, message: str, iterations: int = 0, residual: float = float("nan")):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


@dataclass
class KrylovConfig:
    """GMRES settings (defaults: tolerance 1e-12, 50 iterations)."""

    rtol: float = 1e-12
    max_iters: int = 50
    restart: int = 50
    preconditioner: str = "ilu0"

    def __post_init__(self):
        if self.rtol <= 0 or self.max_iters < 1 or self.restart < 1:
            raise ValueError("rtol > 0 and max_iters, restart >= 1 required")


class GmresResult(NamedTuple):
    x: np.ndarray
    iterations: int
    residual: float


# ---------------------------------------------------------------------------
# preconditioners


class IdentityPreconditioner:
    name = "none"

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x


class JacobiPreconditioner:
    """Diagonal scaling; zero diagonal entries pass through unscaled."""

    name = "jacobi"

    def __init__(self, a: sp.csr_matrix):
        d = a.diagonal()
        self.inv_diag = np.where(d != 0.0, 1.0 / np.where(d == 0.0, 1.0, d), 1.0)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.inv_diag * x


@njit(cache=True)
def _ilu0_factor(n, indptr, indices, data, diag_idx):
    """In-place IKJ zero-fill factorization; returns 0 on success."""
    for i in range(n):
        if diag_idx[i] < 0:
            return i + 1  # structurally missing diagonal
    for i in range(n):
        row_end = indptr[i + 1]
        for ii in range(indptr[i], row_end):
            k = indices[ii]
            if k >= i:
                break
            piv = data[diag_idx[k]]
            if piv == 0.0:
                return -(k + 1)
            lik = data[ii] / piv
            data[ii] = lik
            kk = diag_idx[k] + 1
            jj = ii + 1
            k_end = indptr[k + 1]
            while kk < k_end and jj < row_end:
                ck = indices[kk]
                cj = indices[jj]
                if ck == cj:
                    data[jj] -= lik * data[kk]
                    kk += 1
                    jj += 1
                elif ck < cj:
                    kk += 1
                else:
                    jj += 1
        if data[diag_idx[i]] == 0.0:
            return -(i + 1)
    return 0


@njit(cache=True)
def _ilu0_solve(n, indptr, indices, data, diag_idx, b, out):
    # forward solve with unit lower factor
    for i in range(n):
        s = b[i]
        for jj in range(indptr[i], diag_idx[i]):
            s -= data[jj] * out[indices[jj]]
        out[i] = s
    # backward solve with upper factor
    for i in range(n - 1, -1, -1):
        s = out[i]
        for jj in range(diag_idx[i] + 1, indptr[i + 1]):
            s -= data[jj] * out[indices[jj]]
        out[i] = s / data[diag_idx[i]]


class ILU0Preconditioner:
    """Zero-fill incomplete LU on the matrix's sparsity pattern."""

    name = "ilu0"

    def __init__(self, a: sp.csr_matrix):
        a = a.tocsr().copy()
        a.sort_indices()
        n = a.shape[0]
        indptr = a.indptr.astype(np.int64)
        indices = a.indices.astype(np.int64)
        data = a.data.astype(np.float64).copy()
        diag_idx = np.full(n, -1, dtype=np.int64)
        for i in range(n):
            row = indices[indptr[i] : indptr[i + 1]]
            hits = np.nonzero(row == i)[0]
            if hits.size:
                diag_idx[i] = indptr[i] + hits[0]
        status = _ilu0_factor(n, indptr, indices, data, diag_idx)
        if status != 0:
            raise ZeroDivisionError(f"zero or missing pivot at row {abs(status) - 1}")
        self.n = n
        self.indptr = indptr
        self.indices = indices
        self.data = data
        self.diag_idx = diag_idx

    def apply(self, x: np.ndarray) -> np.ndarray:
        out = np.empty_like(x)
        _ilu0_solve(self.n, self.indptr, self.indices, self.data, self.diag_idx, x, out)
        return out


def jacobi(a: sp.csr_matrix) -> JacobiPreconditioner:
    return JacobiPreconditioner(a)


def ilu0(a: sp.csr_matrix):
    """ILU(0) applier; falls back to jacobi on a zero pivot."""
    try:
        return ILU0Preconditioner(a)
    except ZeroDivisionError as exc:
        logger.warning("ilu0 factorization failed (%s); falling back to jacobi", exc)
        return JacobiPreconditioner(a)


def make_preconditioner(a: sp.csr_matrix, name: str):
    if name == "none":
        return IdentityPreconditioner()
    if name == "jacobi":
        return jacobi(a)
    if name == "ilu0":
        return ilu0(a)
    raise ValueError(f"unknown preconditioner {name!r}")


# ---------------------------------------------------------------------------
# solvers


def dense_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """LU with partial pivoting (LAPACK); the direct verification oracle."""
    try:
        return np.linalg.solve(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise LinearSolveError("matrix is singular to working precision") from exc


def gmres_solve(
    a: sp.spmatrix,
    b: np.ndarray,
    cfg: KrylovConfig | None = None,
    preconditioner=None,
) -> GmresResult:
    """Restarted GMRES with right preconditioning.

    Returns (x, iterations, achieved residual) where the residual is
    recomputed as ||b - A x|| / ||b|| from the returned x.

    Raises
    ------
    LinearSolveError
        If the iteration budget is exhausted before reaching ``rtol``.
    """
    cfg = cfg or KrylovConfig()
    a = a.tocsr() if sp.issparse(a) else sp.csr_matrix(a)
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    if a.shape != (n, n):
        raise LinearSolveError(f"shape mismatch: A is {a.shape}, b has {n} entries")
    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        return GmresResult(np.zeros(n), 0, 0.0)
    m = preconditioner if preconditioner is not None else make_preconditioner(a, cfg.preconditioner)

    x = np.zeros(n)
    total_iters = 0
    while True:
        r = b - a @ x
        beta = np.linalg.norm(r)
        if beta / norm_b <= cfg.rtol:
            break
        if total_iters >= cfg.max_iters:
            raise LinearSolveError(
                f"GMRES reached {total_iters} iterations with residual "
                f"{beta / norm_b:.3e} > rtol {cfg.rtol:.1e}",
                iterations=total_iters,
                residual=beta / norm_b,
            )
        cycle = min(cfg.restart, cfg.max_iters - total_iters)
        v = np.empty((cycle + 1, n))
        h = np.zeros((cycle + 1, cycle))
        cs = np.zeros(cycle)
        sn = np.zeros(cycle)
        g = np.zeros(cycle + 1)
        g[0] = beta
        v[0] = r / beta
        j_used = 0
        for j in range(cycle):
            w = a @ m.apply(v[j])
            for i in range(j + 1):  # modified Gram-Schmidt
                h[i, j] = w @ v[i]
                w -= h[i, j] * v[i]
            h[j + 1, j] = np.linalg.norm(w)
            total_iters += 1
            breakdown = h[j + 1, j] <= 1e-14 * max(1.0, abs(h[: j + 1, j]).max())
            if not breakdown:
                v[j + 1] = w / h[j + 1, j]
            # apply stored rotations, then a new one, to column j
            for i in range(j):
                t = cs[i] * h[i, j] + sn[i] * h[i + 1, j]
                h[i + 1, j] = -sn[i] * h[i, j] + cs[i] * h[i + 1, j]
                h[i, j] = t
            denom = np.hypot(h[j, j], h[j + 1, j])
            cs[j] = h[j, j] / denom if denom else 1.0
            sn[j] = h[j + 1, j] / denom if denom else 0.0
            h[j, j] = denom
            h[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            j_used = j + 1
            if abs(g[j + 1]) / norm_b <= cfg.rtol or breakdown:
                break
        # solve the small triangular system and update x
        y = np.zeros(j_used)
        for i in range(j_used - 1, -1, -1):
            y[i] = (g[i] - h[i, i + 1 : j_used] @ y[i + 1 : j_used]) / h[i, i]
        x = x + m.apply(v[:j_used].T @ y)

    residual = float(np.linalg.norm(b - a @ x) / norm_b)
    return GmresResult(x, total_iters, residual)
