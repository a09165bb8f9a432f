"""Reference simplex basis functions, bubble function, and quadrature.

The coarse velocity/pressure space is spanned by the barycentric (hat)
functions of the triangle or tetrahedron.  The fine-scale velocity inside
each element is carried by a single scalar bubble, the normalized product
of all barycentric coordinates:

    b = 27 * l0*l1*l2          (triangle)
    b = 256 * l0*l1*l2*l3      (tetrahedron)

which vanishes on the element boundary and equals one at the centroid, so
the fine-scale coefficient has velocity units.

Quadrature rules are conical-product Gauss--Jacobi rules obtained by
collapsing a tensor-product rule on the unit cube onto the simplex.  They
are exact for polynomials up to the requested total degree and have
strictly positive weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import roots_jacobi

MAX_QUADRATURE_DEGREE = 8
DEFAULT_DEGREE = {2: 4, 3: 6}

#: normalization making the bubble peak equal to 1 at the centroid
BUBBLE_SCALE = {2: 27.0, 3: 256.0}


class QuadratureError(ValueError):
    """Raised for unsupported dimension/degree requests."""


@dataclass(frozen=True)
class QuadratureRule:
    """Points (in reference simplex coordinates) and weights.

    Weights sum to the reference volume 1/dim!.
    """

    dim: int
    degree: int
    points: np.ndarray  # (nq, dim)
    weights: np.ndarray  # (nq,)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


def _gauss_jacobi_01(n: int, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Jacobi rule for int_0^1 (1-t)^alpha f(t) dt."""
    x, w = roots_jacobi(n, alpha, 0.0)
    return (1.0 + x) / 2.0, w * 0.5 ** (alpha + 1.0)


def quadrature(dim: int, degree: int | None = None) -> QuadratureRule:
    """Build a simplex quadrature rule exact to the given total degree.

    Parameters
    ----------
    dim : int
        2 (triangle) or 3 (tetrahedron).
    degree : int, optional
        Total polynomial degree to integrate exactly; defaults to 4 in 2D
        and 6 in 3D.  Degrees above 8 are rejected.
    """
    if dim not in (2, 3):
        raise QuadratureError(f"unsupported dimension {dim}")
    if degree is None:
        degree = DEFAULT_DEGREE[dim]
    if degree < 0 or degree > MAX_QUADRATURE_DEGREE:
        raise QuadratureError(
            f"unsupported quadrature degree {degree} (supported: 0..{MAX_QUADRATURE_DEGREE})"
        )
    if degree <= 1:
        # centroid rule: exact for linears on any simplex
        pts = np.full((1, dim), 1.0 / (dim + 1))
        wts = np.array([1.0 / math.factorial(dim)])
        return QuadratureRule(dim, degree, pts, wts)

    n = (degree + 2) // 2  # per-direction count, exact to 2n-1 >= degree
    if dim == 2:
        xu, wu = _gauss_jacobi_01(n, 0.0)
        xv, wv = _gauss_jacobi_01(n, 1.0)
        u, v = np.meshgrid(xu, xv, indexing="ij")
        x1 = u * (1.0 - v)
        x2 = v
        w = np.outer(wu, wv)
        pts = np.column_stack([x1.ravel(), x2.ravel()])
        wts = w.ravel()
    else:
        xu, wu = _gauss_jacobi_01(n, 0.0)
        xv, wv = _gauss_jacobi_01(n, 1.0)
        xw, ww = _gauss_jacobi_01(n, 2.0)
        u, v, w3 = np.meshgrid(xu, xv, xw, indexing="ij")
        x1 = u * (1.0 - v) * (1.0 - w3)
        x2 = v * (1.0 - w3)
        x3 = w3
        w = wu[:, None, None] * wv[None, :, None] * ww[None, None, :]
        pts = np.column_stack([x1.ravel(), x2.ravel(), x3.ravel()])
        wts = w.ravel()
    return QuadratureRule(dim, degree, pts, wts)


def segment_quadrature(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule on [0, 1] (for triangle edges)."""
    n = max(1, (degree + 2) // 2)
    return _gauss_jacobi_01(n, 0.0)


def shape_functions(dim: int, xi: np.ndarray) -> np.ndarray:
    """Hat function values N (..., nen) at reference points xi (..., dim)."""
    xi = np.asarray(xi, dtype=float)
    lam0 = 1.0 - xi.sum(axis=-1)
    return np.concatenate([lam0[..., None], xi], axis=-1)


def shape_gradients(dim: int) -> np.ndarray:
    """Reference gradients DN (nen, dim); constant for linear simplices."""
    dn = np.zeros((dim + 1, dim))
    dn[0, :] = -1.0
    dn[1:, :] = np.eye(dim)
    return dn


def bubble(dim: int, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bubble value b (...,) and reference gradient (..., dim) at xi."""
    xi = np.asarray(xi, dtype=float)
    scale = BUBBLE_SCALE[dim]
    lam = shape_functions(dim, xi)  # (..., nen)
    b = scale * np.prod(lam, axis=-1)
    # d b / d xi_j = scale * sum_a (dlam_a/dxi_j) * prod_{c != a} lam_c
    dlam = shape_gradients(dim)  # (nen, dim)
    nen = dim + 1
    grad = np.zeros(xi.shape)
    for a in range(nen):
        others = scale * np.prod(np.delete(lam, a, axis=-1), axis=-1)
        grad += others[..., None] * dlam[a]
    return b, grad


def eval_basis(dim: int, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Evaluate (N, DN, b, grad_b) on the reference simplex.

    N has shape (..., nen), DN (nen, dim) (constant), b (...,) and
    grad_b (..., dim).
    """
    n = shape_functions(dim, xi)
    dn = shape_gradients(dim)
    b, gb = bubble(dim, xi)
    return n, dn, b, gb


@dataclass(frozen=True)
class BasisTables:
    """Basis functions tabulated at the points of one quadrature rule."""

    dim: int
    quad: QuadratureRule
    N: np.ndarray  # (nq, nen)
    DN: np.ndarray  # (nen, dim), reference gradients
    b: np.ndarray  # (nq,)
    Db: np.ndarray  # (nq, dim), reference bubble gradients

    @property
    def nen(self) -> int:
        return self.dim + 1


def tabulate(quad: QuadratureRule) -> BasisTables:
    n, dn, b, gb = eval_basis(quad.dim, quad.points)
    return BasisTables(quad.dim, quad, n, dn, b, gb)


def element_kinematics(coords: np.ndarray, dn: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched affine map data for elements with node coords (ne, nen, dim).

    Returns (J, detJ, Jinv) with J[e, i, j] = d x_i / d xi_j.  Negative or
    zero Jacobians are reported by the caller via detJ's sign.
    """
    j = np.einsum("eai,aj->eij", coords, dn)
    detj = np.linalg.det(j)
    jinv = np.linalg.inv(j)
    return j, detj, jinv


def physical_gradients(tables: BasisTables, jinv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Physical shape-function and bubble gradients for a batch.

    Returns G (ne, nen, dim) with G[e, a, i] = dN_a/dx_i and
    g (ne, nq, dim) with g[e, q, i] = db/dx_i at quadrature point q.
    """
    g_shape = np.einsum("aj,eji->eai", tables.DN, jinv)
    g_bub = np.einsum("qj,eji->eqi", tables.Db, jinv)
    return g_shape, g_bub
