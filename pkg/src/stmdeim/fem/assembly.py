"""Operator and vector assembly on a fixed sparsity pattern.

Every bilinear form is assembled into two blocks: free rows x free columns
(the operator ``A_{s,s}`` whose nonzero vector has length ``N_z``) and free
rows x Dirichlet columns (needed to move the lifting to the right-hand side).
Local contributions are scattered with ``np.bincount``, which sums in a fixed
order, so results do not depend on how cells are batched.
"""
from __future__ import annotations

from collections import Counter
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import reference as ref
from .space import FESpace

FORMS = ("mass", "stiffness_with_field", "divergence", "rhs_volume", "rhs_neumann")


class AssemblyError(ValueError):
    pass


class Pattern:
    """CSR pattern of one block of a bilinear form, with the local-to-nonzero scatter map.

    ``scatter`` has one entry per local contribution ``(cell, i, j)`` (C order)
    holding its nonzero index, or ``-1`` when the entry falls outside the block.
    """

    def __init__(self, rows: np.ndarray, cols: np.ndarray, n_rows: int, n_cols: int, block: int):
        self.shape = (n_rows, n_cols)
        self.block = block
        mask = (rows >= 0) & (cols >= 0)
        keys = rows[mask] * n_cols + cols[mask]
        uniq, inv = np.unique(keys, return_inverse=True)
        self.rows = uniq // max(n_cols, 1)
        self.cols = uniq % max(n_cols, 1) if n_cols else uniq
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(self.rows, minlength=n_rows))]).astype(np.int64)
        self.indices = self.cols.astype(np.int64)
        self.nnz = len(uniq)
        self.scatter = np.full(rows.shape, -1, dtype=np.int64)
        self.scatter[mask] = inv.ravel()
        # contributions grouped by nonzero, each group in ascending local position
        pos = np.flatnonzero(self.scatter >= 0)
        order = np.argsort(self.scatter[pos], kind="stable")
        self.contrib = pos[order]
        self.contrib_start = np.searchsorted(self.scatter[self.contrib], np.arange(self.nnz + 1))

    def values(self, local: np.ndarray, cells=None) -> np.ndarray:
        """Sum local contributions; ``local`` holds the blocks of ``cells`` (all cells by default)."""
        scatter = self.scatter
        if cells is not None:
            scatter = scatter.reshape(-1, self.block)[np.asarray(cells, dtype=np.int64)].ravel()
        flat = local.ravel()
        ok = scatter >= 0
        return np.bincount(scatter[ok], weights=flat[ok], minlength=self.nnz)

    def matrix(self, data) -> sp.csr_matrix:
        return sp.csr_matrix((np.asarray(data, dtype=float), self.indices.copy(), self.indptr.copy()),
                             shape=self.shape)


def _block_patterns(test: FESpace, trial: FESpace):
    rows = np.broadcast_to(test.cell_dofs[:, :, None], (test.mesh.n_cells, test.n_local, trial.n_local)).ravel()
    cols = np.broadcast_to(trial.cell_dofs[:, None, :], (test.mesh.n_cells, test.n_local, trial.n_local)).ravel()
    rf = test.free_index[rows]
    block = test.n_local * trial.n_local
    ff = Pattern(rf, trial.free_index[cols], test.n_free, trial.n_free, block)
    fd = Pattern(rf, trial.dirichlet_index[cols], test.n_free, trial.n_dirichlet, block)
    return ff, fd


def _vectorize(local: np.ndarray, components: int) -> np.ndarray:
    """Block-diagonal extension of scalar local matrices to ``components`` copies."""
    if components == 1:
        return local
    nc, a, b = local.shape
    out = np.zeros((nc, components, a, components, b))
    for i in range(components):
        out[:, i, :, i, :] = local
    return out.reshape(nc, components * a, components * b)


class Assembler:
    """Assembly of the standard forms on one space (and an optional pressure space)."""

    def __init__(self, space: FESpace, pressure_space: FESpace | None = None):
        if space.order == 0:
            raise AssemblyError("the primary space must be continuous (Q1 or Q2)")
        self.space = space
        self.pressure_space = pressure_space
        if pressure_space is not None:
            if pressure_space.mesh is not space.mesh:
                raise AssemblyError("velocity and pressure spaces live on different meshes")
            if pressure_space.order != 0 or pressure_space.components != 1:
                raise AssemblyError("divergence form expects a scalar P0 pressure space")
            if space.components != 3:
                raise AssemblyError("divergence form expects a vector velocity space")
        self.counters = Counter()

    # -- patterns ----------------------------------------------------------
    @cached_property
    def patterns(self) -> tuple[Pattern, Pattern]:
        return _block_patterns(self.space, self.space)

    @cached_property
    def divergence_patterns(self) -> tuple[Pattern, Pattern]:
        if self.pressure_space is None:
            raise AssemblyError("no pressure space attached")
        return _block_patterns(self.pressure_space, self.space)

    @property
    def nnz(self) -> int:
        """``N_z`` of the free-free operator block."""
        return self.patterns[0].nnz

    # -- local kernels -------------------------------------------------------
    @cached_property
    def _stiffness_kernel(self) -> np.ndarray:
        dx, _, G = self.space.geometry
        return np.einsum("cq,cqai,cqbi->cqab", dx, G, G)

    def _cells(self, cells):
        return slice(None) if cells is None else np.asarray(cells, dtype=np.int64)

    def local_mass(self, cells=None) -> np.ndarray:
        dx, V, _ = self.space.geometry
        loc = np.einsum("cq,qa,qb->cab", dx[self._cells(cells)], V, V)
        return _vectorize(loc, self.space.components)

    def local_stiffness(self, field_cells: np.ndarray, cells=None) -> np.ndarray:
        K = self._stiffness_kernel[self._cells(cells)]
        loc = np.einsum("cq,cqab->cab", field_cells, K)
        return _vectorize(loc, self.space.components)

    def local_divergence(self, cells=None) -> np.ndarray:
        dx, _, G = self.space.geometry
        sel = self._cells(cells)
        # (nc, comp, nloc): int psi div(phi_{comp, b}) with psi = 1 on the cell
        loc = np.einsum("cq,cqbj->cjb", dx[sel], G[sel])
        return loc.reshape(loc.shape[0], 1, -1)

    # -- field handling --------------------------------------------------------
    def _field_cells(self, field, cells=None) -> np.ndarray:
        field = np.asarray(field, dtype=float)
        nq = self.space.n_qp_per_cell
        ncells = self.space.mesh.n_cells if cells is None else len(cells)
        if field.ndim == 0:
            return np.full((ncells, nq), float(field))
        if field.size != ncells * nq:
            raise AssemblyError(f"field has {field.size} values, expected {ncells * nq} quadrature values")
        return field.reshape(ncells, nq)

    # -- global operators ---------------------------------------------------------
    @cached_property
    def _mass_blocks(self):
        ff, fd = self.patterns
        loc = self.local_mass()
        return ff.matrix(ff.values(loc)), fd.matrix(fd.values(loc))

    def mass(self) -> sp.csr_matrix:
        return self._mass_blocks[0]

    def mass_fd(self) -> sp.csr_matrix:
        return self._mass_blocks[1]

    def stiffness_local(self, field) -> np.ndarray:
        return self.local_stiffness(self._field_cells(field))

    def stiffness_nonzeros(self, field) -> np.ndarray:
        """Nonzero vector (length ``N_z``) of the free-free stiffness with the given field."""
        return self.patterns[0].values(self.stiffness_local(field))

    def stiffness(self, field) -> sp.csr_matrix:
        return self.patterns[0].matrix(self.stiffness_nonzeros(field))

    def stiffness_blocks(self, field) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        ff, fd = self.patterns
        loc = self.stiffness_local(field)
        return ff.matrix(ff.values(loc)), fd.matrix(fd.values(loc))

    def operator_matrix(self, nonzeros) -> sp.csr_matrix:
        nonzeros = np.asarray(nonzeros, dtype=float)
        if nonzeros.shape != (self.nnz,):
            raise AssemblyError(f"expected {self.nnz} nonzeros, got {nonzeros.shape}")
        return self.patterns[0].matrix(nonzeros)

    @cached_property
    def _divergence_blocks(self):
        ff, fd = self.divergence_patterns
        loc = self.local_divergence()
        return ff.matrix(ff.values(loc)), fd.matrix(fd.values(loc))

    def divergence(self) -> sp.csr_matrix:
        """``B[q, u] = int psi_q div(phi_u)`` on free velocity DOFs."""
        return self._divergence_blocks[0]

    def divergence_fd(self) -> sp.csr_matrix:
        return self._divergence_blocks[1]

    # -- vectors ----------------------------------------------------------------
    def rhs_volume(self, values, cells=None) -> np.ndarray:
        """``int f phi`` as a full-length DOF vector; ``values`` at quadrature points
        (``(N_q,)`` for scalar spaces, ``(N_q, 3)`` for vector ones)."""
        sp_ = self.space
        dx, V, _ = sp_.geometry
        sel = self._cells(cells)
        ncells = sp_.mesh.n_cells if cells is None else len(cells)
        nq = sp_.n_qp_per_cell
        values = np.asarray(values, dtype=float)
        if values.ndim == 0:
            values = np.full((ncells * nq, sp_.components), float(values))
        values = values.reshape(ncells, nq, sp_.components)
        loc = np.einsum("cq,qa,cqk->cka", dx[sel], V, values).reshape(ncells, -1)
        return np.bincount(sp_.cell_dofs[sel].ravel(), weights=loc.ravel(), minlength=sp_.n_dofs)

    def rhs_neumann(self, h, t, mu, cells=None, tags=("neumann",)) -> np.ndarray:
        """``int_{Gamma_N} h phi`` over facets carrying one of ``tags``."""
        sp_ = self.space
        mesh = sp_.mesh
        out = np.zeros(sp_.n_dofs)
        facets = mesh.facets_with(tags)
        if cells is not None and len(facets):
            facets = facets[np.isin(facets[:, 0], cells)]
        if len(facets) == 0:
            return out
        dofs, contrib = [], []
        for f in range(6):
            sel = facets[facets[:, 1] == f, 0]
            if len(sel) == 0:
                continue
            pts, w = ref.face_quadrature(sp_.quadrature_order, f)
            J, _, _ = ref.geometry_at(mesh.vertices[mesh.cells[sel]], pts)
            axis = f // 2
            t1, t2 = [a for a in range(3) if a != axis]
            area = np.linalg.norm(np.cross(J[..., :, t1], J[..., :, t2]), axis=-1)
            x = ref.map_points(mesh.vertices[mesh.cells[sel]], pts)
            hv = np.asarray(h(x.reshape(-1, 3), t, mu), dtype=float).reshape(len(sel), len(w), -1)
            if hv.shape[-1] != sp_.components:
                hv = np.broadcast_to(hv, (len(sel), len(w), sp_.components))
            V, _ = ref.tensor_basis(sp_.order, pts)
            loc = np.einsum("cq,qa,cqk->cka", area * w[None, :], V, hv).reshape(len(sel), -1)
            dofs.append(sp_.cell_dofs[sel].ravel())
            contrib.append(loc.ravel())
        return out + np.bincount(np.concatenate(dofs), weights=np.concatenate(contrib), minlength=sp_.n_dofs)

    # -- sampled assembly -----------------------------------------------------------
    def cells_for_entries(self, sample) -> np.ndarray:
        """Cells contributing to the given free-free nonzero indices."""
        ff = self.patterns[0]
        sample = np.asarray(sample, dtype=np.int64)
        if sample.size and (sample.min() < 0 or sample.max() >= ff.nnz):
            raise AssemblyError("sample index outside the nonzero pattern")
        per_cell = self.space.n_local ** 2
        pos = np.concatenate([ff.contrib[ff.contrib_start[k]: ff.contrib_start[k + 1]] for k in sample]) \
            if sample.size else np.zeros(0, dtype=np.int64)
        return np.unique(pos // per_cell)

    def sampled_stiffness(self, sample, field_at_cells) -> np.ndarray:
        """Entries ``sample`` of the stiffness nonzero vector, integrating only touched cells.

        ``field_at_cells(cells)`` returns the field at the quadrature points of
        ``cells`` (shape ``(len(cells) * nq,)``).
        """
        ff = self.patterns[0]
        sample = np.asarray(sample, dtype=np.int64)
        cells = self.cells_for_entries(sample)
        self.counters["cells_touched"] += len(cells)
        self.counters["entries_sampled"] += len(sample)
        if sample.size == 0:
            return np.zeros(0)
        loc = self.local_stiffness(self._field_cells(field_at_cells(cells), cells), cells)
        per_cell = self.space.n_local ** 2
        lookup = np.full(self.space.mesh.n_cells, -1, dtype=np.int64)
        lookup[cells] = np.arange(len(cells))
        groups = [ff.contrib[ff.contrib_start[k]: ff.contrib_start[k + 1]] for k in sample]
        pos = np.concatenate(groups)
        owner = np.repeat(np.arange(len(sample)), [len(g) for g in groups])
        local_pos = lookup[pos // per_cell] * per_cell + pos % per_cell
        return np.bincount(owner, weights=loc.ravel()[local_pos], minlength=len(sample))


def assembler_for(space: FESpace, pressure_space: FESpace | None = None) -> Assembler:
    """Cached assembler attached to ``space`` (one per pressure-space pairing)."""
    cache = space.__dict__.setdefault("_assemblers", {})
    key = id(pressure_space)
    if key not in cache:
        cache[key] = Assembler(space, pressure_space)
    return cache[key]


def evaluate_field_at_quadrature(space: FESpace, fn, t: float, mu, cells=None) -> np.ndarray:
    """Values of ``fn(x, t, mu)`` at the quadrature points, cell-then-point order."""
    pts = space.quadrature_points
    if cells is not None:
        nq = space.n_qp_per_cell
        pts = pts.reshape(space.mesh.n_cells, nq, 3)[np.asarray(cells, dtype=np.int64)].reshape(-1, 3)
    return np.asarray(fn(pts, t, np.asarray(mu, dtype=float)), dtype=float)


def assemble(form: str, space: FESpace, field=None, *, pressure_space: FESpace | None = None,
             fn=None, t: float = 0.0, mu=None):
    """Dispatch on ``form``; returns a CSR operator on free DOFs or a full-length vector."""
    if form not in FORMS:
        raise AssemblyError(f"unknown form {form!r}")
    asm = assembler_for(space, pressure_space)
    if form == "mass":
        return asm.mass()
    if form == "stiffness_with_field":
        if field is None:
            raise AssemblyError("stiffness needs a quadrature field")
        return asm.stiffness(field)
    if form == "divergence":
        if pressure_space is None:
            raise AssemblyError("divergence needs a pressure space")
        return asm.divergence()
    if form == "rhs_volume":
        if field is None:
            field = evaluate_field_at_quadrature(space, fn, t, mu)
        return asm.rhs_volume(field)
    return asm.rhs_neumann(fn, t, mu)


def sampled_assembly(form: str, space: FESpace, fn, t: float, mu, sample) -> np.ndarray:
    """Sampled stiffness nonzeros with diffusivity ``fn``; see :meth:`Assembler.sampled_stiffness`."""
    if form != "stiffness_with_field":
        raise AssemblyError("sampled assembly of operators supports the stiffness form")
    asm = assembler_for(space)
    return asm.sampled_stiffness(sample, lambda cells: evaluate_field_at_quadrature(space, fn, t, mu, cells))


def dirichlet_lifting(space: FESpace, g, t: float, mu) -> np.ndarray:
    """Nodal interpolant of ``g`` on constrained DOFs; zero on free DOFs.

    DOFs constrained by ``dirichlet_zero`` or ``dirichlet_nopen`` only (no
    ``dirichlet`` facet touches them) get zero.
    """
    from .space import DATA

    out = np.zeros(space.n_dofs)
    dofs = np.flatnonzero(space.dof_source == DATA)
    if len(dofs) == 0:
        return out
    nodes = np.unique(dofs // space.components)
    vals = np.asarray(g(space.node_coords[nodes], t, np.asarray(mu, dtype=float)), dtype=float)
    vals = vals.reshape(len(nodes), -1)
    if vals.shape[1] != space.components:
        vals = np.broadcast_to(vals, (len(nodes), space.components))
    full = np.zeros((space.n_nodes, space.components))
    full[nodes] = vals
    flat = full.ravel()
    out[dofs] = flat[dofs]
    return out


def norm_matrix(space: FESpace, kind: str = "H1"):
    """``X = M + A(1)`` (``H1``) or ``X = M`` (``L2``) on free DOFs."""
    from ..hypermatrix import NormMatrix

    if space.order == 0:
        if kind != "L2":
            raise AssemblyError("P0 spaces only carry the L2 norm")
        dx, _, _ = space.geometry
        return NormMatrix(sp.diags(dx.sum(axis=1)).tocsr())
    asm = assembler_for(space)
    if kind == "L2":
        return NormMatrix(asm.mass())
    if kind == "H1":
        return NormMatrix((asm.mass() + asm.stiffness(1.0)).tocsr())
    raise AssemblyError(f"unknown norm kind {kind!r}")
