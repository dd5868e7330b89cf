"""Reference hexahedron: tensor Lagrange bases, Gauss rules and the trilinear geometry map.

Everything lives on the unit cube ``[0, 1]^3``.  Tensor-product objects are
enumerated first-direction fastest, so local node ``(a, b, c)`` of a degree-``p``
element has index ``a + (p + 1) * (b + (p + 1) * c)``.  For ``p = 1`` this is
the mesh vertex ordering.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np


def lagrange_1d(order: int, x) -> tuple[np.ndarray, np.ndarray]:
    """Values and derivatives of the equispaced 1D Lagrange basis at ``x``.

    Returns two ``(len(x), order + 1)`` arrays.
    """
    x = np.asarray(x, dtype=float)
    if order == 0:
        return np.ones((x.size, 1)), np.zeros((x.size, 1))
    nodes = np.linspace(0.0, 1.0, order + 1)
    vals = np.ones((x.size, order + 1))
    ders = np.zeros((x.size, order + 1))
    for i in range(order + 1):
        others = [j for j in range(order + 1) if j != i]
        denom = np.prod([nodes[i] - nodes[j] for j in others])
        factors = np.stack([x - nodes[j] for j in others], axis=1)
        vals[:, i] = np.prod(factors, axis=1) / denom
        for k in range(len(others)):
            rest = np.delete(factors, k, axis=1)
            ders[:, i] += np.prod(rest, axis=1) / denom
    return vals, ders


@lru_cache(maxsize=None)
def gauss_1d(npoints: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(npoints)
    return (x + 1.0) / 2.0, w / 2.0


def tensor_points(points_1d: np.ndarray, weights_1d: np.ndarray, dim: int = 3):
    """Tensor grid (first coordinate fastest) with product weights."""
    grids = np.meshgrid(*([points_1d] * dim), indexing="ij")
    pts = np.column_stack([g.ravel(order="F") for g in grids])
    wgrids = np.meshgrid(*([weights_1d] * dim), indexing="ij")
    w = np.prod(np.column_stack([g.ravel(order="F") for g in wgrids]), axis=1)
    return pts, w


@lru_cache(maxsize=None)
def cell_quadrature(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss rule exact for degree ``2 * order`` (``order + 1`` points per direction)."""
    n = max(order, 1) + 1
    return tensor_points(*gauss_1d(n), dim=3)


def face_quadrature(order: int, face: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss points on local face ``face`` of the unit cube, as 3D reference coordinates."""
    n = max(order, 1) + 1
    pts2, w = tensor_points(*gauss_1d(n), dim=2)
    axis, side = divmod(face, 2)
    pts = np.empty((len(pts2), 3))
    free = [a for a in range(3) if a != axis]
    pts[:, free[0]] = pts2[:, 0]
    pts[:, free[1]] = pts2[:, 1]
    pts[:, axis] = float(side)
    return pts, w


def tensor_basis(order: int, points) -> tuple[np.ndarray, np.ndarray]:
    """Values ``(nq, nloc)`` and reference gradients ``(nq, nloc, 3)`` of the Q``order`` basis."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    p1 = order + 1
    v = [lagrange_1d(order, points[:, d]) for d in range(3)]
    nloc = p1 ** 3
    vals = np.empty((len(points), nloc))
    grads = np.empty((len(points), nloc, 3))
    for c in range(p1):
        for b in range(p1):
            for a in range(p1):
                i = a + p1 * (b + p1 * c)
                va, vb, vc = v[0][0][:, a], v[1][0][:, b], v[2][0][:, c]
                da, db, dc = v[0][1][:, a], v[1][1][:, b], v[2][1][:, c]
                vals[:, i] = va * vb * vc
                grads[:, i, 0] = da * vb * vc
                grads[:, i, 1] = va * db * vc
                grads[:, i, 2] = va * vb * dc
    return vals, grads


def reference_nodes(order: int) -> np.ndarray:
    """Reference coordinates of the local nodes, in local-index order."""
    if order == 0:
        return np.full((1, 3), 0.5)
    pts, _ = tensor_points(np.linspace(0.0, 1.0, order + 1), np.ones(order + 1), dim=3)
    return pts


def geometry_at(cell_vertices: np.ndarray, points: np.ndarray):
    """Jacobian, determinant and inverse of the trilinear map at reference ``points``.

    ``cell_vertices`` is ``(nc, 8, 3)``; returns ``J (nc, nq, 3, 3)`` with
    ``J[..., i, j] = d x_i / d xi_j``, ``det (nc, nq)`` and ``Jinv``.
    """
    _, G = tensor_basis(1, points)
    J = np.einsum("cvi,qvj->cqij", cell_vertices, G)
    det = np.linalg.det(J)
    Jinv = np.linalg.inv(J)
    return J, det, Jinv


def map_points(cell_vertices: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Physical coordinates ``(nc, nq, 3)`` of reference ``points`` in every cell."""
    V, _ = tensor_basis(1, points)
    return np.einsum("cvi,qv->cqi", cell_vertices, V)


def face_dofs(order: int, face: int) -> np.ndarray:
    """Local node indices lying on local face ``face``."""
    if order == 0:
        return np.zeros(0, dtype=np.int64)
    p1 = order + 1
    axis, side = divmod(face, 2)
    target = 0 if side == 0 else order
    out = []
    for i in range(p1 ** 3):
        idx = (i % p1, (i // p1) % p1, i // (p1 * p1))
        if idx[axis] == target:
            out.append(i)
    return np.array(out, dtype=np.int64)
