"""Matrix discrete empirical interpolation in space and in space-time.

Four variants share one greedy index selection:

* ``STD``   POD of the operator nonzeros over all ``(t, mu)``, coefficients per time step;
* ``ST``    additionally a time basis and time samples, one coefficient vector per ``mu``;
* ``FUN``   POD of the coefficient field at the quadrature points, assembly of the
  field modes, then the ``STD`` machinery on those reduced operators;
* ``STFUN`` ``FUN`` plus the time basis of the field, sampled greedily.

Space-time coefficient vectors are ordered space-major: coefficient
``(i_s, i_t)`` sits at position ``i_s * n_t + i_t``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .hypermatrix import Hypermatrix, load, save
from .tpod import PodError, space_compressed, spod, st_hosvd

VARIANTS = ("STD", "ST", "FUN", "STFUN")
_COND_LIMIT = 1.0 / (100 * np.finfo(float).eps)
# the Gram route resolves singular values only down to sqrt(machine eps) of the largest
_GRAM_FLOOR = 1e-7


def _pod_method(eps: float) -> str:
    return "gram" if eps >= _GRAM_FLOOR else "svd"


class MdeimError(ValueError):
    pass


def greedy_indices(basis) -> np.ndarray:
    """Interpolation indices of the columns of ``basis`` (greedy residual maximization).

    Ties in ``argmax`` resolve to the lowest index.
    """
    V = np.asarray(basis, dtype=float)
    if V.ndim != 2 or V.shape[1] == 0:
        raise MdeimError("basis must be a nonempty matrix")
    N, n = V.shape
    if n > N:
        raise MdeimError("more basis vectors than rows")
    first = V[:, 0]
    if not np.any(first):
        raise MdeimError("first basis vector vanishes")
    idx = [int(np.argmax(np.abs(first)))]
    for k in range(1, n):
        v = V[:, k]
        PV = V[idx, :k]
        if np.linalg.cond(PV) > _COND_LIMIT:
            raise MdeimError(f"singular interpolation matrix at iteration {k + 1}")
        c = np.linalg.solve(PV, v[idx])
        r = v - V[:, :k] @ c
        r[idx] = 0.0  # exact in exact arithmetic; keeps indices distinct under roundoff
        if np.max(np.abs(r)) <= 1e-14 * max(np.linalg.norm(v), 1e-300):
            raise MdeimError(f"basis vector {k + 1} is dependent on the previous ones")
        idx.append(int(np.argmax(np.abs(r))))
    return np.array(idx, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class _Interp:
    """Basis, samples and LU factors of ``P^T Phi`` for one axis."""

    basis: np.ndarray
    samples: np.ndarray
    lu: tuple

    @classmethod
    def build(cls, basis: np.ndarray, samples=None) -> "_Interp":
        basis = np.ascontiguousarray(basis, dtype=float)
        samples = greedy_indices(basis) if samples is None else np.asarray(samples, dtype=np.int64)
        PtPhi = basis[samples]
        cond = np.linalg.cond(PtPhi)
        if not np.isfinite(cond) or cond > _COND_LIMIT:
            raise MdeimError(f"interpolation matrix is singular (condition {cond:.3e})")
        return cls(basis, samples, sla.lu_factor(PtPhi))

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return sla.lu_solve(self.lu, rhs)

    def solve_transpose(self, rhs: np.ndarray) -> np.ndarray:
        return sla.lu_solve(self.lu, rhs, trans=1)

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.rank))

    def chi(self) -> float:
        return float(np.linalg.norm(self.inverse()))


@dataclass(frozen=True, eq=False)
class FieldCompression:
    field_space_basis: np.ndarray
    reduced_operator_snapshots: np.ndarray
    field_time_basis: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class MdeimInterpolant:
    """Result of one MDEIM build.

    ``kind`` is ``"operator"`` (rows index operator nonzeros) or ``"rhs"``
    (rows index free DOFs).  ``norms`` stores the snapshot norms entering the
    a priori bounds.
    """

    variant: str
    kind: str
    eps: float
    space: _Interp
    time: _Interp | None = None
    fields: FieldCompression | None = None
    norms: dict = field(default_factory=dict)

    # -- sizes -------------------------------------------------------------------
    @property
    def space_basis(self) -> np.ndarray:
        return self.space.basis

    @property
    def space_samples(self) -> np.ndarray:
        return self.space.samples

    @property
    def time_basis(self) -> np.ndarray | None:
        return None if self.time is None else self.time.basis

    @property
    def time_samples(self) -> np.ndarray | None:
        return None if self.time is None else self.time.samples

    @property
    def n_space(self) -> int:
        return self.space.rank

    @property
    def n_time(self) -> int:
        return 0 if self.time is None else self.time.rank

    @property
    def spacetime(self) -> bool:
        return self.time is not None

    @property
    def n_coefficients(self) -> int:
        """Coefficients per online solve (per time step for space-only variants)."""
        return self.n_space * self.n_time if self.spacetime else self.n_space

    @property
    def chi(self) -> float:
        """``||(P^T Phi)^{-1}||_F``; for space-time variants the Kronecker factor product."""
        c = self.space.chi()
        return c * self.time.chi() if self.spacetime else c

    def sample_times(self, n_time: int) -> np.ndarray:
        """Time indices (0-based) at which online entries are needed."""
        return self.time.samples if self.spacetime else np.arange(n_time)

    # -- online ----------------------------------------------------------------
    def online_coefficients(self, sampled) -> np.ndarray:
        """Solve the interpolation condition for sampled entries.

        Space-only variants accept ``(n_s,)`` or ``(n_s, N_t)`` samples and return
        matching coefficients; space-time variants accept the ``n_s * n_t`` samples
        (space-major) or an ``(n_s, n_t)`` array and return the flat space-major vector.
        """
        S = np.asarray(sampled, dtype=float)
        if not self.spacetime:
            if S.shape[0] != self.n_space:
                raise MdeimError(f"expected {self.n_space} sampled entries, got {S.shape[0]}")
            return self.space.solve(S)
        if S.size != self.n_space * self.n_time:
            raise MdeimError(f"expected {self.n_space * self.n_time} sampled entries, got {S.size}")
        S = S.reshape(self.n_space, self.n_time)
        # (PsPhis kron PtPhit) vec_C(C) = vec_C(S)  <=>  PsPhis C PtPhit^T = S
        C = self.space.solve(S)
        C = self.time.solve(C.T).T
        return C.ravel()

    def coefficient_matrix(self, coefficients) -> np.ndarray:
        c = np.asarray(coefficients, dtype=float)
        if self.spacetime:
            if c.size != self.n_space * self.n_time:
                raise MdeimError("coefficient length mismatch")
            return c.reshape(self.n_space, self.n_time)
        if c.shape[0] != self.n_space:
            raise MdeimError("coefficient length mismatch")
        return c

    def time_coefficients(self, coefficients) -> np.ndarray:
        """Per-step spatial coefficients ``(n_s, N_t)``: ``C Phi_t^T`` for space-time variants."""
        C = self.coefficient_matrix(coefficients)
        return C @ self.time.basis.T if self.spacetime else C

    def reconstruct(self, coefficients) -> np.ndarray:
        """``Phi c`` for space-only variants; the ``N x N_t`` expansion ``Phi_s C Phi_t^T`` otherwise."""
        if self.spacetime:
            return self.space.basis @ self.time_coefficients(coefficients)
        return self.space.basis @ self.coefficient_matrix(coefficients)

    def interpolate(self, full) -> np.ndarray:
        """Interpolant of a full ``N x N_t`` snapshot (sample, solve, reconstruct)."""
        full = np.asarray(full, dtype=float)
        return self.reconstruct(self.online_coefficients(self.sample(full)))

    def sample(self, full) -> np.ndarray:
        """Entries of a full snapshot (``N`` or ``N x N_t``) at the sample points."""
        full = np.asarray(full, dtype=float)
        rows = full[self.space.samples]
        if self.spacetime:
            return rows[:, self.time.samples].ravel()
        return rows

    # -- persistence -----------------------------------------------------------------
    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save(Hypermatrix(self.space.basis, ("s", "S")), directory / "space_basis.bin")
        save(Hypermatrix(self.space.lu[0], ("s", "S")), directory / "space_lu.bin")
        manifest = {"variant": self.variant, "kind": self.kind, "eps": self.eps,
                    "space_samples": self.space.samples.tolist(), "space_piv": self.space.lu[1].tolist(),
                    "norms": self.norms, "chi": self.chi}
        if self.time is not None:
            save(Hypermatrix(self.time.basis, ("t", "T")), directory / "time_basis.bin")
            save(Hypermatrix(self.time.lu[0], ("t", "T")), directory / "time_lu.bin")
            manifest["time_samples"] = self.time.samples.tolist()
            manifest["time_piv"] = self.time.lu[1].tolist()
        if self.fields is not None:
            save(Hypermatrix(self.fields.field_space_basis, ("s", "S")), directory / "field_space_basis.bin")
            save(Hypermatrix(self.fields.reduced_operator_snapshots, ("s", "S")), directory / "field_operators.bin")
            if self.fields.field_time_basis is not None:
                save(Hypermatrix(self.fields.field_time_basis, ("t", "T")), directory / "field_time_basis.bin")
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "MdeimInterpolant":
        directory = Path(directory)
        m = json.loads((directory / "manifest.json").read_text())

        def axis(prefix, samples, piv):
            basis = np.array(load(directory / f"{prefix}_basis.bin").data)
            lu = np.array(load(directory / f"{prefix}_lu.bin").data)
            return _Interp(basis, np.array(samples, dtype=np.int64), (lu, np.array(piv, dtype=np.int32)))

        space = axis("space", m["space_samples"], m["space_piv"])
        time = axis("time", m["time_samples"], m["time_piv"]) if "time_samples" in m else None
        fields = None
        if (directory / "field_space_basis.bin").exists():
            ftb = directory / "field_time_basis.bin"
            fields = FieldCompression(np.array(load(directory / "field_space_basis.bin").data),
                                      np.array(load(directory / "field_operators.bin").data),
                                      np.array(load(ftb).data) if ftb.exists() else None)
        return cls(m["variant"], m["kind"], float(m["eps"]), space, time, fields, m["norms"])


# -- builders ------------------------------------------------------------------------------


def _check_snapshots(snapshots: Hypermatrix) -> Hypermatrix:
    if set(snapshots.labels) != {"s", "t", "m"}:
        raise MdeimError("snapshots must carry the axes s, t, m")
    if not np.any(snapshots.data):
        raise MdeimError("snapshots are identically zero")
    return snapshots


def build_algebraic(snapshots: Hypermatrix, eps: float, variant: str = "STD", kind: str = "operator") -> MdeimInterpolant:
    """``STD``: POD of ``A_{s, t mu}`` and greedy samples.  ``ST``: sequential space-then-time
    POD (time POD on the space-compressed snapshots) with greedy samples on both axes."""
    snapshots = _check_snapshots(snapshots)
    A = snapshots.matrix("s")
    norms = {"snapshots": float(np.linalg.norm(A))}
    try:
        if variant == "STD":
            space = spod(A, eps, method=_pod_method(eps))
            return MdeimInterpolant("STD", kind, eps, _Interp.build(space.basis), norms=norms)
        if variant == "ST":
            space, time = st_hosvd(snapshots, eps, method=_pod_method(eps))
            norms["compressed"] = float(np.linalg.norm(space_compressed(snapshots, space.basis).data))
            return MdeimInterpolant("ST", kind, eps, _Interp.build(space.basis), _Interp.build(time.basis),
                                    norms=norms)
    except PodError as exc:
        raise MdeimError(str(exc)) from exc
    raise MdeimError(f"algebraic variants are STD and ST, got {variant!r}")


def build_functional(field_snaps: Hypermatrix, assemble_field: Callable[[np.ndarray], np.ndarray], eps: float,
                     variant: str = "FUN"):
    """Field-first MDEIM of an operator linear in the field.

    ``assemble_field(w)`` maps a quadrature-point vector (length ``N_q``) to the
    operator nonzero vector.  Returns ``(FieldCompression, MdeimInterpolant)``.
    """
    field_snaps = _check_snapshots(field_snaps)
    if variant not in ("FUN", "STFUN"):
        raise MdeimError(f"functional variants are FUN and STFUN, got {variant!r}")
    alpha = field_snaps.matrix("s")
    try:
        if variant == "FUN":
            fspace, ftime = spod(alpha, eps, method=_pod_method(eps)), None
        else:
            fspace, ftime = st_hosvd(field_snaps, eps, method=_pod_method(eps))
    except PodError as exc:
        raise MdeimError(str(exc)) from exc
    Abar = np.column_stack([assemble_field(fspace.basis[:, i]) for i in range(fspace.rank)])
    norms = {"field": float(np.linalg.norm(alpha)), "reduced_operators": float(np.linalg.norm(Abar))}
    try:
        space = spod(Abar, eps, method=_pod_method(eps))
    except PodError as exc:
        raise MdeimError(str(exc)) from exc
    comp = FieldCompression(fspace.basis, Abar, None if ftime is None else ftime.basis)
    if ftime is None:
        return comp, MdeimInterpolant("FUN", "operator", eps, _Interp.build(space.basis), fields=comp, norms=norms)
    norms["field_compressed"] = float(np.linalg.norm(space_compressed(field_snaps, fspace.basis).data))
    # ||Abar kron Phi_t||_F = ||Abar||_F ||Phi_t||_F
    norms["reduced_operators_st"] = norms["reduced_operators"] * float(np.linalg.norm(ftime.basis))
    return comp, MdeimInterpolant("STFUN", "operator", eps, _Interp.build(space.basis), _Interp.build(ftime.basis),
                                  fields=comp, norms=norms)


def online_coefficients(interp: MdeimInterpolant, sampled_entries) -> np.ndarray:
    return interp.online_coefficients(sampled_entries)


def reconstruct(interp: MdeimInterpolant, coefficients) -> np.ndarray:
    return interp.reconstruct(coefficients)


def a_priori_bound(interp: MdeimInterpolant, constant: float | None = None) -> float:
    """Right-hand side of the variant's a priori error bound.

    For the functional variants the field term carries the continuity
    constant of the assembler (see :func:`assembler_gain`); it is taken as 1
    when ``constant`` is not given.
    """
    n, e, chi = interp.norms, interp.eps, interp.chi
    c = 1.0 if constant is None else float(constant)
    if interp.variant == "STD":
        return e * chi * n["snapshots"]
    if interp.variant == "ST":
        return e * chi * np.hypot(n["snapshots"], n["compressed"])
    if interp.variant == "FUN":
        return e * chi * (n["reduced_operators"] + c * n["field"])
    return e * chi * (n["reduced_operators_st"] + c * np.hypot(n["field"], n["field_compressed"]))


def field_residual(interp: MdeimInterpolant, fields) -> np.ndarray:
    """Part of the ``N_q x N_t`` field evaluations not captured by the field bases."""
    if interp.fields is None:
        raise MdeimError("field residuals need a functional interpolant")
    F = np.asarray(fields, dtype=float)
    Ps, Pt = interp.fields.field_space_basis, interp.fields.field_time_basis
    proj = Ps @ (Ps.T @ F)
    if Pt is not None:
        proj = (proj @ Pt) @ Pt.T
    return F - proj


def assembler_gain(interp: MdeimInterpolant, field_sets, assemble_field: Callable[[np.ndarray], np.ndarray]) -> float:
    """Largest ratio ``||T(r)|| / ||r||`` over the field residual columns ``r``.

    ``T`` is the (linear) assembly map from quadrature values to operator
    nonzeros.  This is the continuity constant hidden in the functional
    bounds, measured on the directions the field compression leaves out.
    """
    gain = 0.0
    for F in field_sets:
        R = field_residual(interp, F)
        for r in R.T:
            nr = np.linalg.norm(r)
            if nr > 0.0:
                gain = max(gain, float(np.linalg.norm(assemble_field(r))) / nr)
    return gain
