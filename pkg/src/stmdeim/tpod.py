"""Truncated POD in space, in time, and sequentially (ST-HOSVD).

All routines share one tolerance ``eps`` and the relative-energy criterion:
the rank ``n`` is the smallest value with
``sum(sigma[:n]**2) / sum(sigma**2) >= 1 - eps**2``.

By default the decomposition goes through the eigenvalues of the smaller
Gram matrix (``U^T U`` or ``U U^T``), as is customary for snapshot POD.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .hypermatrix import Hypermatrix, NormMatrix, reshape

_CUTOFF = np.sqrt(np.finfo(float).eps)


class PodError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PodResult:
    """Basis with orthonormal columns in the requested inner product.

    ``singular_values`` keeps the whole spectrum (length ``min(N, M)``) so the
    discarded energy can be inspected; ``rank`` is the number of columns.
    """

    basis: np.ndarray
    singular_values: np.ndarray
    rank: int
    tolerance_used: float
    weighted: bool = False
    meta: dict = field(default_factory=dict)

    def tail_energy(self) -> float:
        """Sum of squared discarded singular values."""
        return float(np.sum(self.singular_values[self.rank:] ** 2))

    def total_energy(self) -> float:
        return float(np.sum(self.singular_values ** 2))


def truncation_rank(sigma, eps: float) -> int:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.size == 0:
        raise PodError("empty spectrum")
    if not 0.0 < eps < 1.0:
        raise PodError(f"eps must lie in (0, 1), got {eps}")
    if np.any(sigma < 0) or np.any(np.diff(sigma) > 0):
        raise PodError("singular values must be nonnegative and nonincreasing")
    energy = sigma ** 2
    total = energy.sum()
    if total == 0.0:
        raise PodError("all singular values vanish")
    # tail[n] = sum_{i >= n} sigma_i^2, summed from the small end so tiny eps stay resolvable
    tail = np.append(np.cumsum(energy[::-1])[::-1], 0.0)
    n = int(np.flatnonzero(tail <= eps ** 2 * total)[0])
    return max(1, min(n, sigma.size))


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    if basis.size == 0:
        return basis
    idx = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[idx, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    return basis * signs


def _orthonormalize(basis: np.ndarray, weight: NormMatrix | None) -> np.ndarray:
    """Restore orthonormality lost by the Gram-matrix route, keeping the span."""
    WB = basis if weight is None else weight.apply(basis)
    G = basis.T @ WB
    err = np.max(np.abs(G - np.eye(G.shape[0]))) if G.size else 0.0
    if err <= 1e-13:
        return basis
    R = sla.cholesky((G + G.T) / 2, lower=False)
    return sla.solve_triangular(R, basis.T, trans="T", lower=False).T


def _ritz_refine(U, basis, sigma, weight):
    """Rotate the retained basis to the singular vectors of its projection of ``U``.

    The Gram eigenvalues carry an absolute error of order ``eps * sigma_max**2``;
    the thin SVD of the ``n x M`` projected snapshots recovers the retained
    singular values to ``eps * sigma_max`` at a cost below that of the Gram step.
    """
    B = basis.T @ (U if weight is None else weight.apply(U))
    W, S, _ = np.linalg.svd(B, full_matrices=False)
    sigma = np.array(sigma, dtype=float)
    n = basis.shape[1]
    sigma[:n] = S
    sigma = np.minimum.accumulate(sigma)
    return basis @ W, sigma


def _eigh_desc(G: np.ndarray):
    lam, V = sla.eigh((G + G.T) / 2)
    lam = lam[::-1]
    V = V[:, ::-1]
    return np.clip(lam, 0.0, None), V


def spod(U, eps: float, weight: NormMatrix | None = None, method: str = "gram") -> PodResult:
    """Truncated POD of the columns of ``U`` (``N x M``).

    With ``weight`` the basis is orthonormal in the ``weight`` inner product;
    the Cholesky factor ``H`` of the weight maps the problem to a Euclidean
    one (``H U``) and the basis is mapped back with ``H^{-1}``.
    """
    U = np.asarray(U, dtype=float)
    if U.ndim != 2:
        raise PodError("spod expects a matrix")
    if not np.any(U):
        raise PodError("snapshot matrix is identically zero")
    N, M = U.shape
    if weight is not None and weight.dim != N:
        raise PodError(f"weight of dimension {weight.dim} for {N} rows")

    if method == "svd":
        Ubar = U if weight is None else weight.apply_factor(U)
        left, sigma, _ = np.linalg.svd(Ubar, full_matrices=False)
        n = truncation_rank(sigma, eps)
        basis = left[:, :n]
        if weight is not None:
            basis = weight.solve_factor(basis)
    elif method == "gram":
        if M <= N:
            # correlation of the snapshots: (HU)^T (HU) = U^T X U
            G = U.T @ (U if weight is None else weight.apply(U))
            lam, V = _eigh_desc(G)
            sigma = np.sqrt(lam)
            n = truncation_rank(sigma, eps)
            keep = int(np.sum(sigma > _CUTOFF * sigma[0]))
            n = min(n, keep)
            # H^{-1} (H U) V S^{-1} = U V S^{-1}
            basis = U @ (V[:, :n] / sigma[:n])
        else:
            Ubar = U if weight is None else weight.apply_factor(U)
            lam, V = _eigh_desc(Ubar @ Ubar.T)
            sigma = np.sqrt(lam)
            n = truncation_rank(sigma, eps)
            basis = V[:, :n]
            if weight is not None:
                basis = weight.solve_factor(basis)
        basis, sigma = _ritz_refine(U, _orthonormalize(basis, weight), sigma, weight)
    else:
        raise PodError(f"unknown method {method!r}")

    basis = _fix_signs(np.ascontiguousarray(basis))
    return PodResult(basis, np.asarray(sigma, dtype=float), int(basis.shape[1]), float(eps),
                     weighted=weight is not None, meta={"method": method, "branch": "cols" if M <= N else "rows"})


def tpod_time(U_time_major, eps: float, method: str = "gram") -> PodResult:
    """Time-axis POD of ``U_{t, ...}`` with the Euclidean inner product."""
    return spod(U_time_major, eps, weight=None, method=method)


def st_hosvd(U: Hypermatrix, eps: float, space_weight: NormMatrix | None = None,
             method: str = "gram") -> tuple[PodResult, PodResult]:
    """Sequential space-then-time POD of a ``(s, t, m)`` hypermatrix.

    The time basis is extracted from the space-compressed snapshots
    ``Phi_s^T W U`` rearranged as ``(t, S m)``.
    """
    if set(U.labels) != {"s", "t", "m"}:
        raise PodError(f"st_hosvd needs axes s, t, m; got {U.labels}")
    U = reshape(U, ("s", "t", "m"))
    space = spod(U.matrix("s"), eps, weight=space_weight, method=method)
    time = tpod_time(space_compressed_time_major(U, space.basis, space_weight), eps, method=method)
    return space, time


def space_compressed(U: Hypermatrix, basis: np.ndarray, weight: NormMatrix | None = None) -> Hypermatrix:
    """``Phi^T W U`` as an ``(S, t, m)`` hypermatrix."""
    Us = U.matrix("s")
    coeff = basis.T @ (Us if weight is None else weight.apply(Us))
    Ns, Nt, Nm = U.extent("s"), U.extent("t"), U.extent("m")
    return Hypermatrix(coeff.reshape((basis.shape[1], Nt, Nm), order="F"), ("S", "t", "m"))


def space_compressed_time_major(U: Hypermatrix, basis: np.ndarray, weight: NormMatrix | None = None) -> np.ndarray:
    """The matrix ``U_hat_{t, S m}`` fed to the time POD."""
    return space_compressed(U, basis, weight).matrix("t")


def st_reconstruct(U: Hypermatrix, space: PodResult, time: PodResult,
                   weight: NormMatrix | None = None) -> Hypermatrix:
    """Space-time projection ``Phi_s Phi_s^T W U Phi_t Phi_t^T`` of every parameter slice."""
    U = reshape(U, ("s", "t", "m"))
    Phi_s, Phi_t = space.basis, time.basis
    out = np.empty(U.dims)
    for k in range(U.extent("m")):
        Uk = np.asarray(U.data[:, :, k])
        c = Phi_s.T @ (Uk if weight is None else weight.apply(Uk))
        out[:, :, k] = Phi_s @ ((c @ Phi_t) @ Phi_t.T)
    return Hypermatrix(out, ("s", "t", "m"))
