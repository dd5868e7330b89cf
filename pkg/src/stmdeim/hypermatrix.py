"""Labeled 3-axis arrays and the weighted norms used by every compression step.

A :class:`Hypermatrix` stores a dense array together with one label per axis.
Atomic labels are ``"s"`` (space, also used for quadrature points and operator
nonzeros), ``"t"`` (time) and ``"m"`` (parameter); reduced axes of bases use
``"S"`` and ``"T"``.  Merging two axes produces a compound label such as
``"tm"``.

The canonical storage order is space fastest-varying (column-major over the
label order).  A merged axis ``"tm"`` therefore has index ``j + N_t * k``, and
the matrix ``U_{s,tm}`` has column ``j + N_t * k`` equal to ``U[:, j, k]``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

ATOMIC_LABELS = frozenset("stmST")
MAGIC = b"STRBHM1"


class HypermatrixError(ValueError):
    pass


def _split_label(label: str) -> tuple[str, ...]:
    return tuple(label)


@dataclass(frozen=True, eq=False)
class Hypermatrix:
    """Dense array with labeled axes.

    ``data.shape`` gives the extent of each axis, in label order.
    """

    data: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        # read-only view: no copy of large snapshot arrays, caller's array stays writable
        data = np.asarray(self.data, dtype=float).view()
        labels = tuple(self.labels)
        if data.ndim != len(labels):
            raise HypermatrixError(f"{data.ndim} axes but {len(labels)} labels")
        if not 1 <= len(labels) <= 3:
            raise HypermatrixError("hypermatrices have 1 to 3 axes")
        atoms = [a for lab in labels for a in _split_label(lab)]
        if any(a not in ATOMIC_LABELS for a in atoms):
            raise HypermatrixError(f"unknown label in {labels}")
        if len(set(atoms)) != len(atoms):
            raise HypermatrixError(f"labels must be distinct, got {labels}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "labels", labels)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def axis(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise HypermatrixError(f"no axis labeled {label!r} in {self.labels}") from None

    def extent(self, label: str) -> int:
        return self.dims[self.axis(label)]

    def flatten(self) -> np.ndarray:
        """Vector in canonical (first-axis fastest) order."""
        return self.data.ravel(order="F")

    @classmethod
    def unflatten(cls, vector, dims: Sequence[int], labels: Sequence[str]) -> "Hypermatrix":
        vector = np.asarray(vector, dtype=float)
        if vector.size != int(np.prod(dims)):
            raise HypermatrixError(f"cannot reshape {vector.size} entries to {tuple(dims)}")
        return cls(vector.reshape(tuple(dims), order="F"), tuple(labels))

    def matrix(self, rows: str) -> np.ndarray:
        """Matricization with ``rows`` as row axis and the others merged (in order)."""
        others = [lab for lab in self.labels if lab != rows]
        perm = [rows] + others
        out = reshape(self, perm, merge=tuple(others) if len(others) == 2 else None)
        return np.asarray(out.data)

    def __eq__(self, other):
        if not isinstance(other, Hypermatrix):
            return NotImplemented
        return self.labels == other.labels and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.labels, self.dims))


def reshape(H: Hypermatrix, permutation: Sequence[str], merge: Sequence[str] | None = None) -> Hypermatrix:
    """Permute the axes of ``H`` to ``permutation`` and optionally merge two adjacent axes.

    The merged axis is indexed first-axis fastest, e.g. merging ``("s", "m")``
    gives the index ``i + N_s * k``.
    """
    permutation = tuple(permutation)
    if sorted(permutation) != sorted(H.labels):
        raise HypermatrixError(f"{permutation} is not a permutation of {H.labels}")
    order = [H.axis(lab) for lab in permutation]
    data = np.transpose(H.data, order)
    labels = permutation
    if merge is not None:
        a, b = tuple(merge)
        if a not in labels or b not in labels:
            raise HypermatrixError(f"unknown label in merge {merge}")
        ia, ib = labels.index(a), labels.index(b)
        if ib != ia + 1:
            raise HypermatrixError(f"axes {a!r} and {b!r} are not adjacent in {labels}")
        shape = data.shape[:ia] + (data.shape[ia] * data.shape[ib],) + data.shape[ib + 1:]
        data = np.reshape(data, shape, order="F")
        labels = labels[:ia] + (a + b,) + labels[ib + 1:]
    return Hypermatrix(data, labels)


def kron(A, B):
    """Kronecker product; sparse if either factor is sparse."""
    if sp.issparse(A) or sp.issparse(B):
        return sp.kron(A, B, format="csr")
    return np.kron(np.asarray(A, dtype=float), np.asarray(B, dtype=float))


# --------------------------------------------------------------------------
# norm matrices


class NormMatrix:
    """Symmetric positive-definite matrix with a lazily computed Cholesky factor.

    ``factor`` is upper triangular with ``factor.T @ factor == matrix``.  The
    inverse is only ever applied through triangular solves on that factor.
    """

    def __init__(self, matrix):
        if sp.issparse(matrix):
            matrix = sp.csr_matrix(matrix, dtype=float)
        else:
            matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError("norm matrix must be square")
        self.matrix = matrix

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray() if sp.issparse(self.matrix) else np.array(self.matrix)

    @cached_property
    def factor(self) -> np.ndarray:
        try:
            return sla.cholesky(self.dense(), lower=False, check_finite=True)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"norm matrix is not positive definite: {exc}") from exc

    def apply(self, v):
        return self.matrix @ v

    def solve(self, v):
        """``X^{-1} v`` via the Cholesky factor (works column-wise on matrices)."""
        return sla.cho_solve((self.factor, False), v, check_finite=False)

    def apply_factor(self, v):
        """``H v`` where ``X = H^T H``."""
        return self.factor @ v

    def solve_factor(self, v):
        """``H^{-1} v``."""
        return sla.solve_triangular(self.factor, v, lower=False, check_finite=False)

    def solve_factor_transpose(self, v):
        """``H^{-T} v``."""
        return sla.solve_triangular(self.factor, v, trans="T", lower=False, check_finite=False)

    def inner(self, u, v) -> float:
        return float(np.dot(u, self.matrix @ v))

    def inverse_norm2(self, max_iter: int = 200, rtol: float = 1e-8, seed: int = 0) -> float:
        """Largest eigenvalue of ``X^{-1}`` by power iteration on Cholesky solves."""
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(self.dim)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = self.solve(v)
            new = float(np.dot(v, w))
            nw = np.linalg.norm(w)
            if nw == 0.0:
                return 0.0
            v = w / nw
            if lam > 0 and abs(new - lam) <= rtol * abs(new):
                lam = new
                break
            lam = new
        # Rayleigh quotient of the final iterate
        return float(np.dot(v, self.solve(v)))


def weighted_norm(v, X: NormMatrix | None, mode: str = "X") -> float:
    """``sqrt(v^T X v)`` (``mode="X"``) or ``sqrt(v^T X^{-1} v)`` (``mode="X_inverse"``)."""
    v = np.asarray(v, dtype=float)
    if X is None:
        return float(np.linalg.norm(v))
    if v.shape[0] != X.dim:
        raise ValueError(f"vector of length {v.shape[0]} against norm of dimension {X.dim}")
    if mode == "X":
        # ||H v|| is the numerically safer form of sqrt(v^T X v)
        return float(np.linalg.norm(X.apply_factor(v)))
    if mode == "X_inverse":
        return float(np.linalg.norm(X.solve_factor_transpose(v)))
    raise ValueError(f"unknown norm mode {mode!r}")


def spacetime_norm(V, X: NormMatrix | None, delta: float, mode: str = "X") -> float:
    """Norm of a space-time field ``V`` (``N_s x N_t``) in the block-diagonal ``delta * X`` metric."""
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        raise ValueError("expected an N_s x N_t array")
    if X is None:
        base = np.linalg.norm(V)
    elif mode == "X":
        base = np.linalg.norm(X.apply_factor(V))
    elif mode == "X_inverse":
        base = np.linalg.norm(X.solve_factor_transpose(V))
    else:
        raise ValueError(f"unknown norm mode {mode!r}")
    scale = np.sqrt(delta) if mode == "X" else 1.0 / np.sqrt(delta)
    return float(base * scale)


# --------------------------------------------------------------------------
# binary format


def save(H: Hypermatrix, path) -> None:
    """Write ``H`` as ``STRBHM1 | naxes | labels | extents (u64 LE) | data (f64 LE)``."""
    if any(len(lab) != 1 for lab in H.labels):
        raise HypermatrixError("only hypermatrices with atomic axis labels can be saved")
    path = Path(path)
    header = MAGIC + struct.pack("<B", len(H.labels))
    header += "".join(H.labels).encode("ascii")
    header += struct.pack(f"<{len(H.dims)}Q", *H.dims)
    payload = H.flatten().astype("<f8").tobytes()
    path.write_bytes(header + payload)


def load(path) -> Hypermatrix:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise HypermatrixError(f"{path}: bad magic bytes")
    pos = len(MAGIC)
    (naxes,) = struct.unpack_from("<B", raw, pos)
    pos += 1
    labels = tuple(raw[pos: pos + naxes].decode("ascii"))
    pos += naxes
    dims = struct.unpack_from(f"<{naxes}Q", raw, pos)
    pos += 8 * naxes
    count = int(np.prod(dims))
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=pos)
    if pos + 8 * count != len(raw):
        raise HypermatrixError(f"{path}: payload length does not match extents {dims}")
    return Hypermatrix.unflatten(data.astype(float), dims, labels)


def from_matrix(M, labels=("s", "S")) -> Hypermatrix:
    return Hypermatrix(np.asarray(M, dtype=float), tuple(labels))
