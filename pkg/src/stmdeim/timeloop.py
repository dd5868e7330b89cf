"""Backward Euler full-order models, the implicit space-time operator and snapshot generation.

Space-time vectors are ``N_s x N_t`` arrays whose column ``n`` is the state
at ``t_{n+1}``; flattened, they are space fastest, so block ``n`` of the
block-bidiagonal operator ``K_st`` acts on column ``n``.

Dirichlet data is lifted: with ``g_n`` the nodal interpolant at ``t_n`` on
the constrained DOFs, step ``n`` reads

    (M / delta + A(t_n)) U_n - M U_{n-1} / delta = L~_n,
    L~_n = F(t_n) - A_fd(t_n) g_n - M_fd (g_n - g_{n-1}) / delta  (+ M U_0 / delta for n = 1),

so the space-time right-hand side ``L_st`` collects ``L~_1 .. L~_{N_t}``.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import FESpace, assembler_for, dirichlet_lifting, evaluate_field_at_quadrature, norm_matrix
from .fem.mesh import Mesh
from .fem.problems import ParametricData
from .hypermatrix import Hypermatrix, load, save


class FomError(RuntimeError):
    pass


def _solve_sparse(matrix: sp.csr_matrix, rhs: np.ndarray, step: int) -> np.ndarray:
    try:
        lu = spla.splu(matrix.tocsc())
    except RuntimeError as exc:
        raise FomError(f"singular step matrix at step {step}: {exc}") from exc
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        raise FomError(f"non-finite solution at step {step}")
    return x


def _residual_ratio(matrix, x, rhs) -> float:
    nr = np.linalg.norm(rhs)
    r = np.linalg.norm(matrix @ x - rhs)
    return r / nr if nr > 0 else r


class HeatFOM:
    """Q1 Backward Euler model of the parametric heat equation."""

    kind = "heat"

    def __init__(self, mesh: Mesh, data: ParametricData, order: int = 1):
        self.mesh = mesh
        self.data = data
        self.space = FESpace(mesh, order, 1)
        self.asm = assembler_for(self.space)
        self.diagnostics: dict = {}

    # -- sizes ----------------------------------------------------------------
    @property
    def n_space(self) -> int:
        return self.space.n_free

    @property
    def n_time(self) -> int:
        return self.data.n_steps

    @property
    def n_nonzeros(self) -> int:
        return self.asm.nnz

    @property
    def n_quadrature(self) -> int:
        return self.space.n_quadrature

    @property
    def delta(self) -> float:
        return self.data.delta

    @property
    def times(self) -> np.ndarray:
        return self.data.times

    # -- fixed matrices ----------------------------------------------------------
    @property
    def mass(self) -> sp.csr_matrix:
        return self.asm.mass()

    @cached_property
    def norm(self):
        """``X_{s,s} = M + A(1)`` on free DOFs."""
        return norm_matrix(self.space, "H1")

    def config_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(np.ascontiguousarray(self.mesh.vertices).tobytes())
        h.update(np.ascontiguousarray(self.mesh.cells).tobytes())
        h.update(repr(self.mesh.facet_tags).encode())
        h.update(json.dumps([self.space.order, self.data.name, self.data.T, self.data.n_steps,
                             self.data.bounds.tolist()]).encode())
        return h.hexdigest()[:16]

    # -- parametric quantities ----------------------------------------------------
    def field(self, t: float, mu, cells=None) -> np.ndarray:
        return evaluate_field_at_quadrature(self.space, self.data.alpha, t, mu, cells)

    def operator_nonzeros(self, t: float, mu) -> np.ndarray:
        return self.asm.stiffness_nonzeros(self.field(t, mu))

    def operator(self, t: float, mu) -> sp.csr_matrix:
        return self.asm.stiffness(self.field(t, mu))

    def dirichlet_values(self, t: float, mu) -> np.ndarray:
        return dirichlet_lifting(self.space, self.data.g, t, mu)[self.space.dirichlet_dofs]

    def initial_full(self, mu) -> np.ndarray:
        """Nodal interpolant of ``u0`` on all DOFs."""
        vals = np.asarray(self.data.u0(self.space.node_coords, 0.0, np.asarray(mu, float)), dtype=float)
        return vals.reshape(-1)

    def _dirichlet_at(self, n: int, mu) -> np.ndarray:
        if n == 0:
            return self.initial_full(mu)[self.space.dirichlet_dofs]
        return self.dirichlet_values(self.times[n - 1], mu)

    def _source(self, t, mu, cells=None) -> np.ndarray:
        vol = self.asm.rhs_volume(evaluate_field_at_quadrature(self.space, self.data.f, t, mu, cells), cells)
        return vol + self.asm.rhs_neumann(self.data.h, t, mu, cells)

    def lifted_rhs(self, n: int, mu, cells=None, field_cells=None) -> np.ndarray:
        """``L~_n`` (``n = 1..N_t``) on free DOFs; with ``cells`` only those cells are
        integrated (rows whose support lies inside ``cells`` are exact)."""
        t = self.times[n - 1]
        sp_ = self.space
        full = self._source(t, mu, cells)
        rhs = full[sp_.free_dofs]
        if sp_.n_dirichlet:
            gn, gp = self._dirichlet_at(n, mu), self._dirichlet_at(n - 1, mu)
            fd = self.asm.patterns[1]
            if field_cells is None:
                field_cells = self.asm._field_cells(self.field(t, mu, cells), cells)
            A_fd = fd.matrix(fd.values(self.asm.local_stiffness(field_cells, cells), cells))
            rhs = rhs - A_fd @ gn - self.asm.mass_fd() @ (gn - gp) / self.delta
        if n == 1:
            u0 = self.initial_full(mu)[sp_.free_dofs]
            if np.any(u0):
                rhs = rhs + self.mass @ u0 / self.delta
        return rhs

    def rhs_snapshots(self, mu) -> np.ndarray:
        return np.column_stack([self.lifted_rhs(n, mu) for n in range(1, self.n_time + 1)])

    # -- marching -------------------------------------------------------------------
    def solve(self, mu, record: bool = False):
        """Backward Euler solution ``U`` (``N_s x N_t``) on free DOFs.

        With ``record`` also returns a dict with operator nonzeros, RHS vectors
        and quadrature fields per step.
        """
        mu = self.data.check_mu(mu)
        Ns, Nt, d = self.n_space, self.n_time, self.delta
        U = np.empty((Ns, Nt))
        rec = {"operator": np.empty((self.n_nonzeros, Nt)), "rhs": np.empty((Ns, Nt)),
               "field": np.empty((self.n_quadrature, Nt))} if record else None
        prev = np.zeros(Ns)
        M = self.mass
        worst = 0.0
        for n in range(1, Nt + 1):
            t = self.times[n - 1]
            alpha = self.field(t, mu)
            nz = self.asm.stiffness_nonzeros(alpha)
            K = (M / d + self.asm.operator_matrix(nz)).tocsr()
            L = self.lifted_rhs(n, mu, field_cells=self.asm._field_cells(alpha))
            b = L + M @ prev / d
            x = _solve_sparse(K, b, n)
            worst = max(worst, _residual_ratio(K, x, b))
            U[:, n - 1] = x
            prev = x
            if record:
                rec["operator"][:, n - 1] = nz
                rec["rhs"][:, n - 1] = L
                rec["field"][:, n - 1] = alpha
        self.diagnostics["max_step_residual"] = worst
        return (U, rec) if record else U

    def spacetime_residual(self, mu, V) -> np.ndarray:
        """``L_st - K_st V`` blockwise, without forming ``K_st``."""
        V = np.asarray(V, dtype=float)
        if V.shape != (self.n_space, self.n_time):
            raise ValueError(f"expected a {self.n_space} x {self.n_time} array, got {V.shape}")
        mu = np.asarray(mu, dtype=float)
        out = np.empty_like(V)
        M, d = self.mass, self.delta
        for n in range(1, self.n_time + 1):
            A = self.operator(self.times[n - 1], mu)
            r = self.lifted_rhs(n, mu) - (M @ V[:, n - 1]) / d - A @ V[:, n - 1]
            if n > 1:
                r += M @ V[:, n - 2] / d
            out[:, n - 1] = r
        return out

    def spacetime_matrix(self, mu) -> sp.csr_matrix:
        """Explicit ``K_st`` (small instances and tests only)."""
        M, d, Nt = self.mass, self.delta, self.n_time
        blocks = [[None] * Nt for _ in range(Nt)]
        for n in range(Nt):
            blocks[n][n] = M / d + self.operator(self.times[n], mu)
            if n:
                blocks[n][n - 1] = -M / d
        return sp.bmat(blocks, format="csr")

    # -- sampled quantities for the online phase ------------------------------------
    def sampled_operator(self, sample, t: float, mu) -> np.ndarray:
        return self.asm.sampled_stiffness(sample, lambda cells: self.field(t, mu, cells))

    def rhs_cells(self, rows) -> np.ndarray:
        """Cells supporting the given free rows."""
        return self.space.cells_of_dofs(self.space.free_dofs[np.asarray(rows, dtype=np.int64)])

    def sampled_rhs(self, rows, n: int, mu, cells=None) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        if cells is None:
            cells = self.rhs_cells(rows)
        self.asm.counters["rhs_cells_touched"] += len(cells)
        self.asm.counters["rhs_entries_sampled"] += len(rows)
        return self.lifted_rhs(n, mu, cells=cells)[rows]


class StokesFOM(HeatFOM):
    """Q2-P0 Backward Euler model of the unsteady Stokes equations.

    Step matrix ``[[M / delta + A(t_n), -B^T], [B, 0]]``; the pressure row of
    the right-hand side is ``-B_fd g_n``.
    """

    kind = "stokes"

    def __init__(self, mesh: Mesh, data: ParametricData):
        self.mesh = mesh
        self.data = data
        self.space = FESpace(mesh, 2, 3)
        self.pressure_space = FESpace(mesh, 0, 1, constrained=False)
        self.asm = assembler_for(self.space)
        self.div_asm = assembler_for(self.space, self.pressure_space)
        self.diagnostics = {}

    @property
    def n_pressure(self) -> int:
        return self.pressure_space.n_free

    @property
    def divergence(self) -> sp.csr_matrix:
        return self.div_asm.divergence()

    @cached_property
    def pressure_norm(self):
        return norm_matrix(self.pressure_space, "L2")

    def initial_full(self, mu) -> np.ndarray:
        vals = np.asarray(self.data.u0(self.space.node_coords, 0.0, np.asarray(mu, float)), dtype=float)
        return vals.reshape(self.space.n_nodes, 3).ravel()

    def pressure_rhs(self, n: int, mu) -> np.ndarray:
        if not self.space.n_dirichlet:
            return np.zeros(self.n_pressure)
        return -(self.div_asm.divergence_fd() @ self._dirichlet_at(n, mu))

    def pressure_rhs_snapshots(self, mu) -> np.ndarray:
        return np.column_stack([self.pressure_rhs(n, mu) for n in range(1, self.n_time + 1)])

    def solve(self, mu, record: bool = False):
        """Returns ``(U, P)`` (and the record dict when ``record``)."""
        mu = self.data.check_mu(mu)
        Nu, Np, Nt, d = self.n_space, self.n_pressure, self.n_time, self.delta
        U, P = np.empty((Nu, Nt)), np.empty((Np, Nt))
        rec = {"operator": np.empty((self.n_nonzeros, Nt)), "rhs": np.empty((Nu, Nt)),
               "rhs_p": np.empty((Np, Nt)), "field": np.empty((self.n_quadrature, Nt))} if record else None
        M, B = self.mass, self.divergence
        prev = np.zeros(Nu)
        worst, worst_div = 0.0, 0.0
        for n in range(1, Nt + 1):
            t = self.times[n - 1]
            alpha = self.field(t, mu)
            nz = self.asm.stiffness_nonzeros(alpha)
            K = M / d + self.asm.operator_matrix(nz)
            S = sp.bmat([[K, -B.T], [B, None]], format="csr")
            L = self.lifted_rhs(n, mu, field_cells=self.asm._field_cells(alpha))
            Lp = self.pressure_rhs(n, mu)
            b = np.concatenate([L + M @ prev / d, Lp])
            x = _solve_sparse(S, b, n)
            worst = max(worst, _residual_ratio(S, x, b))
            U[:, n - 1], P[:, n - 1] = x[:Nu], x[Nu:]
            nu = np.linalg.norm(x[:Nu])
            if nu > 0:
                worst_div = max(worst_div, np.linalg.norm(B @ x[:Nu] - Lp) / nu)
            prev = x[:Nu]
            if record:
                rec["operator"][:, n - 1] = nz
                rec["rhs"][:, n - 1] = L
                rec["rhs_p"][:, n - 1] = Lp
                rec["field"][:, n - 1] = alpha
        self.diagnostics["max_step_residual"] = worst
        self.diagnostics["max_divergence_residual"] = worst_div
        return (U, P, rec) if record else (U, P)


def be_solve_heat(system: HeatFOM, mu) -> np.ndarray:
    return system.solve(mu)


def be_solve_stokes(system: StokesFOM, mu):
    return system.solve(mu)


def spacetime_residual(system: HeatFOM, mu, V) -> np.ndarray:
    return system.spacetime_residual(mu, V)


# -- snapshots ----------------------------------------------------------------------


@dataclass(eq=False)
class SnapshotSet:
    """Hypermatrices of a parameter sweep (labels ``s, t, m``).

    ``operator``, ``fields`` (and the RHS) cover the first ``n_operator``
    parameters only; ``states`` cover all of them.
    """

    states: Hypermatrix
    rhs: Hypermatrix
    operator: Hypermatrix | None
    fields: Hypermatrix
    parameters: np.ndarray
    config_hash: str
    pressure: Hypermatrix | None = None
    rhs_pressure: Hypermatrix | None = None
    timings_ms: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def n_params(self) -> int:
        return self.states.extent("m")

    _FILES = ("states", "rhs", "operator", "fields", "pressure", "rhs_pressure")

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in self._FILES:
            H = getattr(self, name)
            if H is not None:
                save(H, directory / f"{name}.bin")
        manifest = {"config_hash": self.config_hash, "parameters": self.parameters.tolist(),
                    "timings_ms": self.timings_ms, "failures": self.failures,
                    "files": [n for n in self._FILES if getattr(self, n) is not None]}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory, expected_hash: str | None = None) -> "SnapshotSet":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        if expected_hash is not None and manifest["config_hash"] != expected_hash:
            raise FomError(f"snapshot configuration hash {manifest['config_hash']} != {expected_hash}")
        parts = {n: (load(directory / f"{n}.bin") if n in manifest["files"] else None) for n in cls._FILES}
        return cls(parameters=np.array(manifest["parameters"], dtype=float), config_hash=manifest["config_hash"],
                   timings_ms=manifest["timings_ms"], failures=manifest["failures"], **parts)


def _stack(slices, rows, n_time):
    arr = np.empty((rows, n_time, len(slices)))
    for k, s in enumerate(slices):
        arr[:, :, k] = s
    return Hypermatrix(arr, ("s", "t", "m"))


def generate_snapshots(system: HeatFOM, parameters, n_operator: int | None = 30,
                       keep_operator: bool = True) -> SnapshotSet:
    """Run the FOM for each parameter (in order) and collect the snapshot hypermatrices.

    A failing parameter is recorded in ``failures`` and skipped; the others
    are still processed.  ``keep_operator=False`` drops the operator nonzeros
    (only the field-first variants are built when they do not fit in memory).
    """
    parameters = np.atleast_2d(np.asarray(parameters, dtype=float))
    n_operator = len(parameters) if n_operator is None else min(n_operator, len(parameters))
    stokes = isinstance(system, StokesFOM)
    states, pressures, ops, rhs, rhs_p, fields, kept, timings, failures = [], [], [], [], [], [], [], [], []
    for k, mu in enumerate(parameters):
        record = k < n_operator
        start = time.perf_counter()
        try:
            out = system.solve(mu, record=True)
        except FomError as exc:
            failures.append({"index": k, "error": str(exc)})
            continue
        timings.append(1e3 * (time.perf_counter() - start))
        kept.append(k)
        if stokes:
            U, P, rec = out
            pressures.append(P)
        else:
            U, rec = out
        states.append(U)
        if record:
            if keep_operator:
                ops.append(rec["operator"])
            rhs.append(rec["rhs"])
            fields.append(rec["field"])
            if stokes:
                rhs_p.append(rec["rhs_p"])
    Nt = system.n_time
    return SnapshotSet(
        states=_stack(states, system.n_space, Nt),
        rhs=_stack(rhs, system.n_space, Nt),
        operator=_stack(ops, system.n_nonzeros, Nt) if keep_operator else None,
        fields=_stack(fields, system.n_quadrature, Nt),
        parameters=parameters[kept],
        config_hash=system.config_hash(),
        pressure=_stack(pressures, system.n_pressure, Nt) if stokes else None,
        rhs_pressure=_stack(rhs_p, system.n_pressure, Nt) if stokes else None,
        timings_ms=timings,
        failures=failures,
    )
