"""Space-time reduced basis with hyper-reduced operators.

Reduced space-time unknowns are ``n_s x n_t`` coefficient matrices ``U_hat``;
flattened they follow the space-fastest convention (time-major blocks), so
every Kronecker product below is written ``kron(time_factor, space_factor)``.
The reduced left-hand side is::

    K_hat = kron(I - S_hat, M_hat / delta) + sum_q kron(W_q, A_hat_q)

with ``S_hat = Phi_t^T Sigma_- Phi_t`` (``Sigma_-`` the unit subdiagonal) and
``W_q`` the temporal weight of the q-th operator mode.
"""
from __future__ import annotations

import json
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .hypermatrix import Hypermatrix, NormMatrix, load, save
from .mdeim import MdeimInterpolant, build_algebraic, build_functional
from .tpod import st_hosvd, st_reconstruct

METHODS = ("STD", "ST", "FUN", "STFUN")
# algebraic variant used for the right-hand side of each method
RHS_VARIANT = {"STD": "STD", "ST": "ST", "FUN": "STD", "STFUN": "ST"}
_SINGULAR = 1e14


class StrbError(RuntimeError):
    pass


def _pod_method(eps: float) -> str:
    return "gram" if eps >= 1e-7 else "svd"


@dataclass(frozen=True, eq=False)
class StateBasis:
    """Space basis (``X``-orthonormal) and time basis (Euclidean-orthonormal)."""

    space: np.ndarray
    time: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_s(self) -> int:
        return self.space.shape[1]

    @property
    def n_t(self) -> int:
        return self.time.shape[1]

    @property
    def n_st(self) -> int:
        return self.n_s * self.n_t

    def expand(self, coeffs) -> np.ndarray:
        return self.space @ np.asarray(coeffs).reshape(self.n_s, self.n_t, order="F") @ self.time.T


def build_state_basis(snapshots: Hypermatrix, eps: float, X: NormMatrix | None) -> StateBasis:
    """ST-HOSVD with the ``X`` inner product in space; records the training-set error check."""
    space, tbasis = st_hosvd(snapshots, eps, space_weight=X, method=_pod_method(eps))
    rec = st_reconstruct(snapshots, space, tbasis, X)
    diff = (snapshots.data - rec.data).reshape(snapshots.extent("s"), -1, order="F")
    err2 = float(np.sum((X.apply_factor(diff) if X is not None else diff) ** 2))
    bound2 = space.tail_energy() + tbasis.tail_energy()
    total2 = space.total_energy()
    meta = {"eps": eps, "error2": err2, "bound2": bound2, "corollary2": 2 * eps ** 2 * total2,
            "certified": bool(err2 <= bound2 * (1 + 1e-8) + 1e-26 * total2),
            "space_singular_values": space.singular_values.tolist(),
            "time_singular_values": tbasis.singular_values.tolist()}
    return StateBasis(space.basis, tbasis.basis, meta)


def _append_orthonormal(basis: np.ndarray, extra: np.ndarray, X: NormMatrix | None, drop: float = 1e-10):
    """Gram-Schmidt (twice) of ``extra`` against ``basis`` in the ``X`` inner product."""
    cols = [basis[:, i] for i in range(basis.shape[1])]
    Q = basis.copy()
    apply = (lambda v: v) if X is None else X.apply
    for j in range(extra.shape[1]):
        v = extra[:, j].copy()
        ref = np.sqrt(max(v @ apply(v), 0.0))
        if ref == 0.0:
            continue
        for _ in range(2):
            if Q.shape[1]:
                v -= Q @ (Q.T @ apply(v))
        nv = np.sqrt(max(v @ apply(v), 0.0))
        if nv < drop * ref:
            continue
        cols.append(v / nv)
        Q = np.column_stack(cols)
    return np.column_stack(cols) if cols else basis


def enrich_supremizers(u_basis: StateBasis, p_basis: StateBasis | None, B, X_u: NormMatrix) -> StateBasis:
    """Append spatial supremizers ``X_u^{-1} B^T phi^p`` and the pressure time modes."""
    if p_basis is None or p_basis.n_s == 0:
        return u_basis
    sup = X_u.solve(np.asarray(B.T @ p_basis.space))
    space = _append_orthonormal(u_basis.space, sup, X_u)
    time_ = _append_orthonormal(u_basis.time, p_basis.time, None)
    meta = dict(u_basis.meta, supremizers=space.shape[1] - u_basis.n_s, time_enrichment=time_.shape[1] - u_basis.n_t)
    return StateBasis(space, time_, meta)


# -- hyper-reduction ---------------------------------------------------------------------------


def build_hyper_reduction(system, snapshots, method: str, eps: float):
    """Operator and RHS interpolants (plus the pressure RHS for Stokes) for one method.

    Returns ``(operator, rhs, rhs_pressure)``.
    """
    if method not in METHODS:
        raise StrbError(f"unknown method {method!r}")
    if method in ("STD", "ST"):
        if snapshots.operator is None:
            raise StrbError(f"{method} needs operator snapshots")
        op = build_algebraic(snapshots.operator, eps, method, kind="operator")
    else:
        _, op = build_functional(snapshots.fields, system.asm.stiffness_nonzeros, eps, method)
    rv = RHS_VARIANT[method]
    rhs = build_algebraic(snapshots.rhs, eps, rv, kind="rhs")
    rhs_p = None
    if snapshots.rhs_pressure is not None and np.any(snapshots.rhs_pressure.data):
        rhs_p = build_algebraic(snapshots.rhs_pressure, eps, rv, kind="rhs")
    return op, rhs, rhs_p


# -- reduced model --------------------------------------------------------------------------------


@dataclass(eq=False)
class RomModel:
    method: str
    eps: float
    config_hash: str
    delta: float
    n_time: int
    u: StateBasis
    op: MdeimInterpolant
    rhs: MdeimInterpolant
    blocks: dict
    p: StateBasis | None = None
    rhs_p: MdeimInterpolant | None = None
    meta: dict = field(default_factory=dict)

    @property
    def stokes(self) -> bool:
        return self.p is not None

    @property
    def reduced_dim(self) -> int:
        return self.u.n_st + (self.p.n_st if self.p is not None else 0)

    @property
    def coefficient_dim(self) -> int:
        """Operator coefficients solved online: ``n^a_st`` or ``N_t n^a_s``."""
        return self.op.n_coefficients if self.op.spacetime else self.op.n_space * self.n_time

    # -- persistence ----------------------------------------------------------------
    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, basis in (("u", self.u), ("p", self.p)):
            if basis is None:
                continue
            save(Hypermatrix(basis.space, ("s", "S")), directory / f"{name}_space.bin")
            save(Hypermatrix(basis.time, ("t", "T")), directory / f"{name}_time.bin")
        for name in ("op", "rhs", "rhs_p"):
            interp = getattr(self, name)
            if interp is not None:
                interp.save(directory / name)
        np.savez(directory / "blocks.npz", **{k: v for k, v in self.blocks.items()})
        manifest = {"method": self.method, "eps": self.eps, "config_hash": self.config_hash, "delta": self.delta,
                    "n_time": self.n_time, "n_s": self.u.n_s, "n_t": self.u.n_t,
                    "p": None if self.p is None else [self.p.n_s, self.p.n_t],
                    "u_meta": self.u.meta, "p_meta": None if self.p is None else self.p.meta, "meta": self.meta}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory, expected_hash: str | None = None) -> "RomModel":
        directory = Path(directory)
        m = json.loads((directory / "manifest.json").read_text())
        if expected_hash is not None and m["config_hash"] != expected_hash:
            raise StrbError(f"model configuration hash {m['config_hash']} != {expected_hash}")

        def basis(name, meta):
            if not (directory / f"{name}_space.bin").exists():
                return None
            return StateBasis(np.array(load(directory / f"{name}_space.bin").data),
                              np.array(load(directory / f"{name}_time.bin").data), meta)

        with np.load(directory / "blocks.npz") as z:
            blocks = {k: z[k] for k in z.files}
        rhs_p = MdeimInterpolant.load(directory / "rhs_p") if (directory / "rhs_p").exists() else None
        return cls(m["method"], float(m["eps"]), m["config_hash"], float(m["delta"]), int(m["n_time"]),
                   basis("u", m["u_meta"]), MdeimInterpolant.load(directory / "op"),
                   MdeimInterpolant.load(directory / "rhs"), blocks, basis("p", m["p_meta"]), rhs_p, m["meta"])


def _shift(n: int) -> np.ndarray:
    return np.eye(n, k=-1)


def galerkin_compress(system, u_basis: StateBasis, op: MdeimInterpolant, rhs: MdeimInterpolant, method: str,
                      eps: float, p_basis: StateBasis | None = None, rhs_p: MdeimInterpolant | None = None,
                      check_parameters=()) -> RomModel:
    """Precompute every parameter-independent reduced block."""
    Phi, Psi = u_basis.space, u_basis.time
    Nt = system.n_time
    if Psi.shape[0] != Nt or Phi.shape[0] != system.n_space:
        raise StrbError("state basis does not match the system")
    blocks = {
        "M": Phi.T @ (system.mass @ Phi),
        "S": Psi.T @ _shift(Nt) @ Psi,
        "A": np.stack([Phi.T @ (system.asm.operator_matrix(op.space_basis[:, q]) @ Phi) for q in range(op.n_space)]),
        "L_space": Phi.T @ rhs.space_basis,
        "rhs_cells": system.rhs_cells(rhs.space_samples),
    }
    if op.spacetime:
        # D[q_t] = Psi^T diag(Phi^a_t[:, q_t]) Psi
        blocks["D"] = np.einsum("nq,na,nb->qab", op.time_basis, Psi, Psi)
    if rhs.spacetime:
        blocks["L_time"] = rhs.time_basis.T @ Psi
    if p_basis is not None:
        B = system.divergence
        Pp, Pt = p_basis.space, p_basis.time
        blocks["B"] = Pp.T @ (B @ Phi)
        blocks["BT"] = Phi.T @ (B.T @ Pp)
        blocks["B_time"] = Pt.T @ Psi
        blocks["BT_time"] = Psi.T @ Pt
        if rhs_p is not None:
            blocks["Lp_space"] = Pp.T @ rhs_p.space_basis
            if rhs_p.spacetime:
                blocks["Lp_time"] = rhs_p.time_basis.T @ Pt
    model = RomModel(method, eps, system.config_hash(), system.delta, Nt, u_basis, op, rhs, blocks, p_basis, rhs_p)
    conds = []
    for mu in check_parameters:
        lhs = reduced_lhs(model, *_operator_coefficients(model, system, mu))
        conds.append(float(np.linalg.cond(lhs)))
        if not np.isfinite(conds[-1]) or conds[-1] > _SINGULAR:
            raise StrbError(f"reduced left-hand side singular at mu={list(mu)} (condition {conds[-1]:.3e})")
    model.meta["training_conditions"] = conds
    return model


# -- online ------------------------------------------------------------------------------------


def _operator_coefficients(model: RomModel, system, mu):
    """Sample the operator at the interpolation entries and solve for its coefficients."""
    op = model.op
    times = system.times
    idx = op.sample_times(model.n_time)
    sampled = np.column_stack([system.sampled_operator(op.space_samples, times[n], mu) for n in idx])
    return (op.online_coefficients(sampled),)


def _rhs_coefficients(model: RomModel, system, mu):
    rhs = model.rhs
    cells = model.blocks["rhs_cells"]
    idx = rhs.sample_times(model.n_time)
    sampled = np.column_stack([system.sampled_rhs(rhs.space_samples, n + 1, mu, cells) for n in idx])
    out = rhs.online_coefficients(sampled)
    if model.rhs_p is None:
        return out, None
    rp = model.rhs_p
    # the pressure data -B_fd g_n lives on the boundary and is cheap to evaluate directly
    sp_ = np.column_stack([system.pressure_rhs(n + 1, mu)[rp.space_samples] for n in rp.sample_times(model.n_time)])
    return out, rp.online_coefficients(sp_)


def temporal_weights(model: RomModel, coeffs) -> np.ndarray:
    """``W_q`` (``n^a_s x n_t x n_t``) for the online operator coefficients."""
    op, Psi = model.op, model.u.time
    if op.spacetime:
        return np.einsum("st,tab->sab", op.coefficient_matrix(coeffs), model.blocks["D"])
    C = op.coefficient_matrix(coeffs)
    return np.einsum("qn,na,nb->qab", C, Psi, Psi)


def reduced_lhs(model: RomModel, coeffs) -> np.ndarray:
    b = model.blocks
    nt = model.u.n_t
    Md = b["M"] / model.delta
    K = np.kron(np.eye(nt) - b["S"], Md)
    for Wq, Aq in zip(temporal_weights(model, coeffs), b["A"]):
        K += np.kron(Wq, Aq)
    if not model.stokes:
        return K
    Bst = np.kron(b["B_time"], b["B"])
    BTst = np.kron(b["BT_time"], b["BT"])
    npst = model.p.n_st
    return np.block([[K, -BTst], [Bst, np.zeros((npst, npst))]])


def reduced_rhs(model: RomModel, rhs_coeffs, rhs_p_coeffs=None) -> np.ndarray:
    b = model.blocks
    Psi = model.u.time
    C = model.rhs.coefficient_matrix(rhs_coeffs)
    Lu = b["L_space"] @ C @ (b["L_time"] if model.rhs.spacetime else Psi)
    out = Lu.ravel(order="F")
    if not model.stokes:
        return out
    if model.rhs_p is None:
        return np.concatenate([out, np.zeros(model.p.n_st)])
    Cp = model.rhs_p.coefficient_matrix(rhs_p_coeffs)
    Lp = b["Lp_space"] @ Cp @ (b["Lp_time"] if model.rhs_p.spacetime else model.p.time)
    return np.concatenate([out, Lp.ravel(order="F")])


@dataclass(eq=False)
class OnlineResult:
    reduced: np.ndarray
    U: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    op_coefficients: np.ndarray
    rhs_coefficients: np.ndarray
    counters: dict
    elapsed_ms: float
    P: np.ndarray | None = None
    reduced_p: np.ndarray | None = None
    rhs_p_coefficients: np.ndarray | None = None
    condition: float | None = None


def online_solve(model: RomModel, system, mu, expand: bool = True) -> OnlineResult:
    """Sample, interpolate, assemble and solve the reduced space-time system."""
    if system.config_hash() != model.config_hash:
        raise StrbError("model and system configuration hashes differ")
    mu = system.data.check_mu(mu)
    before = Counter(system.asm.counters)
    start = time.perf_counter()
    (c_op,) = _operator_coefficients(model, system, mu)
    c_rhs, c_rhs_p = _rhs_coefficients(model, system, mu)
    lhs = reduced_lhs(model, c_op)
    rhs = reduced_rhs(model, c_rhs, c_rhs_p)
    try:
        lu = sla.lu_factor(lhs, check_finite=True)
    except (ValueError, sla.LinAlgError) as exc:
        raise StrbError(f"reduced solve failed at mu={mu.tolist()}: {exc}") from exc
    # cheap reciprocal-condition estimate from the LU diagonal
    diag = np.abs(np.diag(lu[0]))
    if diag.min() == 0.0 or diag.max() / diag.min() > _SINGULAR:
        cond = float(np.linalg.cond(lhs))
        if not np.isfinite(cond) or cond > _SINGULAR:
            raise StrbError(f"singular reduced left-hand side at mu={mu.tolist()} (condition {cond:.3e})")
    x = sla.lu_solve(lu, rhs)
    elapsed = 1e3 * (time.perf_counter() - start)
    used = Counter(system.asm.counters)
    used.subtract(before)
    counters = {"entries_sampled": int(used["entries_sampled"]), "cells_touched": int(used["cells_touched"]),
                "rhs_entries_sampled": int(used["rhs_entries_sampled"]),
                "coefficient_dim": model.coefficient_dim, "reduced_dim": model.reduced_dim}
    nu = model.u.n_st
    Uhat = x[:nu].reshape(model.u.n_s, model.u.n_t, order="F")
    res = OnlineResult(Uhat, model.u.expand(Uhat) if expand else None, lhs, rhs, c_op, c_rhs, counters, elapsed,
                       rhs_p_coefficients=c_rhs_p)
    if model.stokes:
        Phat = x[nu:].reshape(model.p.n_s, model.p.n_t, order="F")
        res.reduced_p = Phat
        res.P = model.p.expand(Phat) if expand else None
    return res


def online_solve_stokes(model: RomModel, system, mu, expand: bool = True) -> OnlineResult:
    if not model.stokes:
        raise StrbError("model has no pressure basis")
    return online_solve(model, system, mu, expand)


def build_rom(system, snapshots, method: str, eps: float, u_basis: StateBasis | None = None,
              p_basis: StateBasis | None = None, check_parameters=()) -> RomModel:
    """Offline pipeline for one (method, eps): bases (if not given), interpolants, compression."""
    stokes = snapshots.pressure is not None
    if u_basis is None:
        u_basis = build_state_basis(snapshots.states, eps, system.norm)
        if stokes:
            p_basis = build_state_basis(snapshots.pressure, eps, system.pressure_norm)
            u_basis = enrich_supremizers(u_basis, p_basis, system.divergence, system.norm)
    op, rhs, rhs_p = build_hyper_reduction(system, snapshots, method, eps)
    return galerkin_compress(system, u_basis, op, rhs, method, eps, p_basis, rhs_p, check_parameters)
