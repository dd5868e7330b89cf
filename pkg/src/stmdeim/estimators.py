"""A posteriori error estimation for the hyper-reduced space-time model.

Space-time norms use ``X_st = delta * blockdiag(X)``, hence
``||X_st^{-1}||_2 = ||X^{-1}||_2 / delta``.  The error bound evaluated here is::

    ||U - Phi U_hat||_X <= beta^{-1} ( ||R||_{X^{-1}}
                                       + ||X^{-1/2}|| e_L
                                       + ||X^{-1}|| e_A ||Phi U_hat||_X )

where ``R = L~ - K~ Phi U_hat`` is the residual of the interpolated system and
``e_L``, ``e_A`` bound the interpolation errors of the right-hand side and of the
operator (the variant's a priori MDEIM bound, or the measured error).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hypermatrix import NormMatrix, spacetime_norm
from .mdeim import MdeimInterpolant, a_priori_bound, assembler_gain

_BETA_CAP = 512
_POWER_CAP = 50_000


class EstimatorError(ValueError):
    pass


@dataclass
class ErrorReport:
    method: str
    eps: float
    mu: np.ndarray
    E_u: float | None = None
    E_p: float | None = None
    residual_term: float = 0.0
    mdeim_terms: dict = field(default_factory=dict)
    beta: float | None = None
    bound_total: float | None = None

    @property
    def beta_certified(self) -> bool:
        return self.beta is not None


# -- building blocks -------------------------------------------------------------------------------


def _approximate_operators(model, result) -> np.ndarray:
    """Interpolated operator nonzeros at every time step (``N_z x N_t``)."""
    return model.op.reconstruct(result.op_coefficients)


def hyper_reduced_residual(system, model, result, U=None) -> np.ndarray:
    """``L~ - K~ U`` blockwise (``N_s x N_t``), with ``U`` the expanded ROM state by default."""
    U = result.U if U is None else U
    L = model.rhs.reconstruct(result.rhs_coefficients)
    A = _approximate_operators(model, result)
    M, d = system.mass, system.delta
    R = np.empty_like(U)
    for n in range(system.n_time):
        prev = U[:, n - 1] if n else 0.0
        R[:, n] = L[:, n] - M @ (U[:, n] - prev) / d - system.asm.operator_matrix(A[:, n]) @ U[:, n]
    if model.stokes and result.P is not None:
        R += system.divergence.T @ result.P
    return R


def residual_estimator(system, model, mu, result) -> float:
    """``||L~ - K~ Phi U_hat||`` in the ``X_st^{-1}`` norm."""
    if result.U is None or result.U.shape != (system.n_space, system.n_time):
        raise EstimatorError("expanded ROM state of the wrong shape")
    return spacetime_norm(hyper_reduced_residual(system, model, result), system.norm, system.delta, "X_inverse")


def inverse_norm(X: NormMatrix, h: float | None = None) -> tuple[float, bool]:
    """``||X^{-1}||_2`` and whether it was computed.

    Power iteration on Cholesky solves up to a size cap; beyond it, with a mesh
    size ``h``, the scaling estimate ``h^{-3}`` (the mass part of ``X`` has
    smallest eigenvalue of order ``h^3``) is returned and flagged as an estimate.
    """
    if X.dim <= _POWER_CAP or h is None:
        return X.inverse_norm2(max_iter=200, rtol=1e-8), True
    return float(h ** -3), False


def coercivity_constant(K, X_st) -> float:
    """Smallest singular value of ``X_st^{-1/2} K X_st^{-1/2}`` (dense)."""
    K = np.asarray(K.toarray() if hasattr(K, "toarray") else K, dtype=float)
    Xd = np.asarray(X_st.toarray() if hasattr(X_st, "toarray") else X_st, dtype=float)
    if K.shape[0] > _BETA_CAP:
        raise EstimatorError(f"coercivity needs a dense SVD; size {K.shape[0]} exceeds {_BETA_CAP}")
    w, V = np.linalg.eigh(Xd)
    if w.min() <= 0:
        raise EstimatorError("norm matrix is not positive definite")
    Xmh = (V / np.sqrt(w)) @ V.T
    return float(np.linalg.svd(Xmh @ K @ Xmh, compute_uv=False).min())


def coercivity_estimate(system, mu, X: NormMatrix | None = None) -> float:
    """``beta(mu)`` of the space-time operator; toy instances only (``N_s N_t <= 512``)."""
    X = system.norm if X is None else X
    if system.n_space * system.n_time > _BETA_CAP:
        raise EstimatorError(f"N_s N_t = {system.n_space * system.n_time} exceeds {_BETA_CAP}")
    Xst = system.delta * np.kron(np.eye(system.n_time), X.dense())
    return coercivity_constant(system.spacetime_matrix(mu), Xst)


def fit_functional_constant(interp: MdeimInterpolant, system, parameters) -> float:
    """Assembler continuity constant of a functional interpolant, fitted on ``parameters``."""
    fields = (np.column_stack([system.field(t, mu) for t in system.times]) for mu in parameters)
    return assembler_gain(interp, fields, system.asm.stiffness_nonzeros)


def _full_snapshot(system, mu, kind):
    if kind == "operator":
        return np.column_stack([system.operator_nonzeros(t, mu) for t in system.times])
    return system.rhs_snapshots(mu)


def bound_terms(system, model, mu, result, *, beta: float | None = None, measured: bool = False,
                functional_constant: float | None = None, x_inverse_norm: float | None = None) -> ErrorReport:
    """Evaluate every term of the a posteriori bound.

    With ``measured`` the a priori MDEIM bounds are replaced by the measured
    interpolation errors for this ``mu`` (exact limit checks).  For the
    functional variants the field term of the operator bound uses
    ``functional_constant``, the assembler constant fitted on training
    parameters.
    """
    op, rhs = model.op, model.rhs
    if op.variant != model.method:
        raise EstimatorError("variant does not match the model's interpolants")
    if not op.norms or not rhs.norms:
        raise EstimatorError("interpolants carry no snapshot norms")
    d = system.delta
    if x_inverse_norm is None:
        x_inverse_norm, _ = inverse_norm(system.norm)
    xinv_st = x_inverse_norm / d
    if measured:
        A = _full_snapshot(system, mu, "operator")
        L = _full_snapshot(system, mu, "rhs")
        e_A = float(np.max(np.linalg.norm(_approximate_operators(model, result) - A, axis=0)))
        e_L = float(np.linalg.norm(rhs.reconstruct(result.rhs_coefficients) - L))
    else:
        if op.variant in ("FUN", "STFUN") and functional_constant is None:
            raise EstimatorError("functional variants need a fitted constant")
        e_A = a_priori_bound(op, functional_constant)
        e_L = a_priori_bound(rhs)
    u_norm = spacetime_norm(result.U, system.norm, d)
    terms = {"rhs": np.sqrt(xinv_st) * e_L, "operator": xinv_st * e_A * u_norm, "e_A": e_A, "e_L": e_L}
    res = residual_estimator(system, model, mu, result)
    report = ErrorReport(model.method, model.eps, np.asarray(mu, float), residual_term=res, mdeim_terms=terms,
                         beta=beta)
    if beta is not None:
        report.bound_total = (res + terms["rhs"] + terms["operator"]) / beta
    return report


def splitting_terms(system, model, mu, result):
    """``(E_M, E_RB)`` with ``E_M + E_RB = K (U - Phi U_hat)``.

    ``E_RB = L~ - K~ Phi U_hat`` is the residual of the interpolated system and
    ``E_M = (L - L~) - (K - K~) Phi U_hat`` collects the interpolation errors.
    """
    U = result.U
    E_RB = hyper_reduced_residual(system, model, result)
    A = _approximate_operators(model, result)
    E_M = system.rhs_snapshots(mu) - model.rhs.reconstruct(result.rhs_coefficients)
    for n, t in enumerate(system.times):
        E_M[:, n] -= (system.operator(t, mu) - system.asm.operator_matrix(A[:, n])) @ U[:, n]
    return E_M, E_RB


# -- metrics ---------------------------------------------------------------------------------------


def relative_errors(hf, rom, X: NormMatrix | None, delta: float, hf_p=None, rom_p=None, X_p: NormMatrix | None = None):
    """Test-set averages of the relative space-time errors ``(E_u, E_p)``.

    ``hf`` and ``rom`` are lists of ``N_s x N_t`` arrays (one per parameter).
    """
    def avg(ref, app, W):
        if len(ref) != len(app) or not ref:
            raise EstimatorError("need matching, nonempty lists of states")
        out = []
        for a, b in zip(ref, app):
            a, b = np.asarray(a, float), np.asarray(b, float)
            if a.shape != b.shape:
                raise EstimatorError(f"shape mismatch {a.shape} vs {b.shape}")
            den = spacetime_norm(a, W, delta)
            if den == 0.0:
                raise EstimatorError("reference state has zero norm")
            out.append(spacetime_norm(a - b, W, delta) / den)
        return float(np.mean(out))

    E_u = avg(list(hf), list(rom), X)
    E_p = avg(list(hf_p), list(rom_p), X_p) if hf_p is not None else None
    return E_u, E_p


def speedup(fom_millis, rom_millis) -> float:
    if len(fom_millis) == 0 or len(rom_millis) == 0:
        raise EstimatorError("speedup needs nonempty timing lists")
    return float(np.mean(fom_millis) / np.mean(rom_millis))
