"""Nodal finite-element spaces on hexahedral meshes (Q1, Q2 continuous; P0 cellwise)."""
from __future__ import annotations

from functools import cached_property

import numpy as np

from . import reference as ref
from .mesh import FACE_VERTICES, Mesh

DIRICHLET_TAGS = ("dirichlet", "dirichlet_zero", "dirichlet_nopen")
# constrained-DOF sources, highest priority wins
FREE, NOPEN, ZERO, DATA = 0, 1, 2, 3
_PRIORITY = {"dirichlet": DATA, "dirichlet_zero": ZERO, "dirichlet_nopen": NOPEN}


class SpaceError(ValueError):
    pass


def _corner_set(local_index: int, order: int) -> list[int]:
    """Local vertices spanning the sub-entity that carries a Q``order`` node."""
    p1 = order + 1
    idx = (local_index % p1, (local_index // p1) % p1, local_index // (p1 * p1))
    choices = []
    for a in idx:
        if a == 0:
            choices.append((0,))
        elif a == order:
            choices.append((1,))
        else:
            choices.append((0, 1))
    return sorted({i + 2 * j + 4 * k for i in choices[0] for j in choices[1] for k in choices[2]})


class FESpace:
    """Scalar or vector Lagrange space.

    Global DOF numbering is ``node * components + component``; local DOFs of a
    cell are numbered component-major (``component * n_local_nodes + a``).
    Constraints come from the mesh boundary tags: ``dirichlet`` and
    ``dirichlet_zero`` fix every component, ``dirichlet_nopen`` only the
    normal one (axis-aligned faces).
    """

    def __init__(self, mesh: Mesh, order: int, components: int = 1, constrained: bool = True):
        if order not in (0, 1, 2):
            raise SpaceError(f"unsupported order {order}")
        if components not in (1, 3):
            raise SpaceError("components must be 1 (scalar) or 3 (vector)")
        self.mesh = mesh
        self.order = order
        self.components = components
        self.quadrature_order = max(order, 1)
        self._number_nodes()
        self._constrain(constrained and order > 0)

    # -- numbering -----------------------------------------------------
    def _number_nodes(self):
        mesh, order = self.mesh, self.order
        if order == 0:
            self.cell_nodes = np.arange(mesh.n_cells, dtype=np.int64)[:, None]
            self.node_coords = ref.map_points(mesh.vertices[mesh.cells], ref.reference_nodes(0))[:, 0, :]
        elif order == 1:
            self.cell_nodes = mesh.cells.copy()
            self.node_coords = mesh.vertices.copy()
        else:
            nloc = (order + 1) ** 3
            corner_sets = [_corner_set(i, order) for i in range(nloc)]
            keys: dict[tuple, int] = {}
            cell_nodes = np.empty((mesh.n_cells, nloc), dtype=np.int64)
            for c, verts in enumerate(mesh.cells.tolist()):
                for i, cs in enumerate(corner_sets):
                    key = tuple(sorted(verts[v] for v in cs))
                    cell_nodes[c, i] = keys.setdefault(key, len(keys))
            coords = np.empty((len(keys), 3))
            phys = ref.map_points(mesh.vertices[mesh.cells], ref.reference_nodes(order))
            coords[cell_nodes.ravel()] = phys.reshape(-1, 3)
            self.cell_nodes = cell_nodes
            self.node_coords = coords
        self.n_nodes = len(self.node_coords)
        self.n_local_nodes = self.cell_nodes.shape[1]
        nc = self.components
        comp = np.arange(nc)
        self.cell_dofs = (self.cell_nodes[:, None, :] * nc + comp[None, :, None]).reshape(mesh.n_cells, -1)
        self.n_dofs = self.n_nodes * nc

    def _constrain(self, active: bool):
        source = np.zeros(self.n_dofs, dtype=np.int8)
        if active:
            nc = self.components
            for (c, f), tag in zip(self.mesh.facets, self.mesh.facet_tags):
                if tag not in _PRIORITY:
                    continue
                nodes = self.cell_nodes[c, ref.face_dofs(self.order, f)]
                if tag == "dirichlet_nopen" and nc > 1:
                    axis = self._facet_axis(c, f)
                    dofs = nodes * nc + axis
                else:
                    dofs = (nodes[:, None] * nc + np.arange(nc)[None, :]).ravel()
                source[dofs] = np.maximum(source[dofs], _PRIORITY[tag])
        self.dof_source = source
        self.dof_source.setflags(write=False)
        self.constrained = source != FREE
        self.free_dofs = np.flatnonzero(~self.constrained)
        self.dirichlet_dofs = np.flatnonzero(self.constrained)
        self.free_index = np.full(self.n_dofs, -1, dtype=np.int64)
        self.free_index[self.free_dofs] = np.arange(len(self.free_dofs))
        self.dirichlet_index = np.full(self.n_dofs, -1, dtype=np.int64)
        self.dirichlet_index[self.dirichlet_dofs] = np.arange(len(self.dirichlet_dofs))

    def _facet_axis(self, cell: int, face: int) -> int:
        pts = self.mesh.vertices[self.mesh.cells[cell, FACE_VERTICES[face]]]
        normal = np.cross(pts[1] - pts[0], pts[2] - pts[0])
        normal /= np.linalg.norm(normal)
        axis = int(np.argmax(np.abs(normal)))
        if abs(abs(normal[axis]) - 1.0) > 1e-10:
            raise SpaceError("no-penetration constraints need axis-aligned faces")
        return axis

    # -- sizes -----------------------------------------------------------
    @property
    def n_free(self) -> int:
        """``N_s``: the number of free DOFs."""
        return len(self.free_dofs)

    @property
    def n_dirichlet(self) -> int:
        return len(self.dirichlet_dofs)

    @property
    def n_local(self) -> int:
        return self.cell_dofs.shape[1]

    # -- quadrature ---------------------------------------------------------
    @cached_property
    def quadrature(self):
        return ref.cell_quadrature(self.quadrature_order)

    @property
    def n_qp_per_cell(self) -> int:
        return len(self.quadrature[1])

    @property
    def n_quadrature(self) -> int:
        """``N_q``: total quadrature points, cell-then-point order."""
        return self.mesh.n_cells * self.n_qp_per_cell

    @cached_property
    def quadrature_points(self) -> np.ndarray:
        pts = ref.map_points(self.mesh.vertices[self.mesh.cells], self.quadrature[0])
        out = pts.reshape(-1, 3)
        out.setflags(write=False)
        return out

    @cached_property
    def geometry(self):
        """``(dx, values, grads)``: weighted determinants ``(nc, nq)``, basis values
        ``(nq, nloc)`` and physical scalar-basis gradients ``(nc, nq, nloc, 3)``."""
        pts, w = self.quadrature
        J, det, Jinv = ref.geometry_at(self.mesh.vertices[self.mesh.cells], pts)
        vals, rgrad = ref.tensor_basis(self.order, pts)
        # grad phi = J^{-T} grad_ref phi
        grads = np.einsum("cqji,qaj->cqai", Jinv, rgrad)
        return det * w[None, :], vals, grads

    def dof_coordinates(self) -> np.ndarray:
        """Coordinates of every DOF (nodes repeated per component)."""
        return np.repeat(self.node_coords, self.components, axis=0)

    def dof_component(self) -> np.ndarray:
        return np.tile(np.arange(self.components), self.n_nodes)

    def cells_of_dofs(self, dofs) -> np.ndarray:
        """Sorted cells whose closure carries any of the given global DOFs."""
        mask = np.isin(self.cell_dofs, np.asarray(dofs)).any(axis=1)
        return np.flatnonzero(mask)
