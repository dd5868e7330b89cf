"""Hexahedral meshes: structured boxes and an ASCII import/export format.

Cell connectivity uses tensor ordering: local vertex ``i + 2 j + 4 k`` sits at
reference coordinates ``(i, j, k)`` of the unit cube.  Local faces are numbered
``2 * axis + side`` (face 0 is ``xi_0 = 0``, face 1 is ``xi_0 = 1``, ...).

ASCII format::

    STRBMESH1 d=3
    vertices <N>
    x y z            (N lines)
    cells <M>
    v0 ... v7        (M lines, tensor ordering)
    facets <K>
    cell face tag    (K lines, one per boundary facet)
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

TAGS = ("dirichlet", "dirichlet_zero", "dirichlet_nopen", "neumann", "neumann_zero")

# local vertices on each local face
FACE_VERTICES = np.array([
    [v for v in range(8) if ((v >> (f // 2)) & 1) == (f % 2)] for f in range(6)
])


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    cells: np.ndarray
    facets: np.ndarray  # (K, 2): cell, local face
    facet_tags: tuple[str, ...]

    def __post_init__(self):
        vertices = np.ascontiguousarray(self.vertices, dtype=float)
        cells = np.ascontiguousarray(self.cells, dtype=np.int64)
        facets = np.ascontiguousarray(self.facets, dtype=np.int64).reshape(-1, 2)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError("vertices must be an (N, 3) array")
        if cells.ndim != 2 or cells.shape[1] != 8:
            raise MeshError("cells must be an (M, 8) array")
        if cells.size and (cells.min() < 0 or cells.max() >= len(vertices)):
            raise MeshError("cell connectivity refers to missing vertices")
        if len(self.facet_tags) != len(facets):
            raise MeshError("one tag per facet required")
        for tag in self.facet_tags:
            if tag not in TAGS:
                raise MeshError(f"unknown boundary tag {tag!r}")
        for arr in (vertices, cells, facets):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "facets", facets)
        object.__setattr__(self, "facet_tags", tuple(self.facet_tags))
        self._check_boundary()
        self._check_volumes()

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def _check_boundary(self):
        keys = {}
        for c in range(self.n_cells):
            for f in range(6):
                key = tuple(sorted(self.cells[c, FACE_VERTICES[f]]))
                keys.setdefault(key, []).append((c, f))
        boundary = {owners[0] for owners in keys.values() if len(owners) == 1}
        tagged = [tuple(x) for x in self.facets.tolist()]
        if len(set(tagged)) != len(tagged):
            raise MeshError("a boundary facet carries more than one tag")
        if set(tagged) != boundary:
            raise MeshError("every boundary facet needs exactly one tag (and only boundary facets)")

    def _check_volumes(self):
        from .reference import geometry_at

        centre = np.full((1, 3), 0.5)
        _, det, _ = geometry_at(self.vertices[self.cells], centre)
        if np.any(det <= 0):
            bad = int(np.argmin(det[:, 0]))
            raise MeshError(f"cell {bad} has nonpositive volume")

    def facets_with(self, tags: Sequence[str]) -> np.ndarray:
        mask = np.array([t in tags for t in self.facet_tags], dtype=bool)
        return self.facets[mask] if len(mask) else self.facets[:0]

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


FacetRule = Callable[[np.ndarray, np.ndarray], "str | None"]


def face_rules(mapping: Mapping[str, str], default: str = "neumann_zero") -> list:
    """Tag rules for box faces named ``x0, x1, y0, y1, z0, z1``.

    Earlier entries of ``mapping`` win on ties (none occur on box faces).
    """
    axes = {"x": 0, "y": 1, "z": 2}
    rules = []
    for name, tag in mapping.items():
        axis, side = axes[name[0]], int(name[1])

        def rule(centroid, normal, axis=axis, side=side, tag=tag):
            return tag if normal[axis] == (1.0 if side else -1.0) else None

        rules.append(rule)
    rules.append(lambda centroid, normal: default)
    return rules


def build_box_mesh(lengths: Sequence[float], divisions: Sequence[int], tag_rules=None) -> Mesh:
    """Structured ``n_x x n_y x n_z`` hexahedral mesh of ``[0,L] x [0,H] x [0,W]``.

    ``tag_rules`` is a sequence of callables ``rule(centroid, outward_normal)``
    returning a tag or ``None``; the first non-``None`` answer is used.  A
    mapping ``{"x0": "dirichlet", ...}`` is accepted as shorthand.
    """
    lengths = np.asarray(lengths, dtype=float)
    divisions = np.asarray(divisions)
    if lengths.shape != (3,) or divisions.shape != (3,):
        raise MeshError("need three lengths and three divisions")
    if np.any(lengths <= 0):
        raise MeshError(f"lengths must be positive, got {lengths.tolist()}")
    if np.any(divisions < 1) or not np.all(divisions == np.round(divisions)):
        raise MeshError(f"divisions must be positive integers, got {divisions.tolist()}")
    nx, ny, nz = (int(d) for d in divisions)
    if tag_rules is None:
        tag_rules = face_rules({})
    elif isinstance(tag_rules, Mapping):
        tag_rules = face_rules(tag_rules)

    xs = [np.linspace(0.0, lengths[a], n + 1) for a, n in enumerate((nx, ny, nz))]
    X, Y, Z = np.meshgrid(*xs, indexing="ij")
    vertices = np.column_stack([X.ravel(order="F"), Y.ravel(order="F"), Z.ravel(order="F")])

    def vid(i, j, k):
        return i + (nx + 1) * (j + (ny + 1) * k)

    I, J, K = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    I, J, K = I.ravel(order="F"), J.ravel(order="F"), K.ravel(order="F")
    cells = np.column_stack([vid(I + (v & 1), J + ((v >> 1) & 1), K + ((v >> 2) & 1)) for v in range(8)])

    facets, tags = [], []
    counts = (nx, ny, nz)
    for c, idx in enumerate(zip(I, J, K)):
        for f in range(6):
            axis, side = divmod(f, 2)
            if (side == 0 and idx[axis] != 0) or (side == 1 and idx[axis] != counts[axis] - 1):
                continue
            normal = np.zeros(3)
            normal[axis] = 1.0 if side else -1.0
            centroid = vertices[cells[c, FACE_VERTICES[f]]].mean(axis=0)
            tag = None
            for rule in tag_rules:
                tag = rule(centroid, normal)
                if tag is not None:
                    break
            if tag is None:
                raise MeshError(f"no rule tags facet at {centroid}")
            facets.append((c, f))
            tags.append(tag)
    return Mesh(vertices, cells, np.array(facets, dtype=np.int64), tuple(tags))


def write_mesh(mesh: Mesh, path) -> None:
    lines = ["STRBMESH1 d=3", f"vertices {mesh.n_vertices}"]
    lines += [" ".join(repr(float(x)) for x in v) for v in mesh.vertices]
    lines.append(f"cells {mesh.n_cells}")
    lines += [" ".join(str(int(i)) for i in c) for c in mesh.cells]
    lines.append(f"facets {len(mesh.facets)}")
    lines += [f"{int(c)} {int(f)} {t}" for (c, f), t in zip(mesh.facets, mesh.facet_tags)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    tokens = Path(path).read_text().split("\n")
    lines = [ln.strip() for ln in tokens if ln.strip() and not ln.strip().startswith("#")]
    if not lines or lines[0].split()[0] != "STRBMESH1":
        raise MeshError(f"{path}: missing STRBMESH1 header")
    header = dict(part.split("=") for part in lines[0].split()[1:])
    if header.get("d", "3") != "3":
        raise MeshError("only 3D meshes are supported")
    pos = 1

    def section(name):
        nonlocal pos
        key, count = lines[pos].split()
        if key != name:
            raise MeshError(f"{path}: expected section {name!r}, found {key!r}")
        count = int(count)
        body = lines[pos + 1: pos + 1 + count]
        pos += 1 + count
        return body

    vertices = np.array([[float(x) for x in ln.split()] for ln in section("vertices")]).reshape(-1, 3)
    cells = np.array([[int(x) for x in ln.split()] for ln in section("cells")], dtype=np.int64).reshape(-1, 8)
    facet_lines = [ln.split() for ln in section("facets")]
    facets = np.array([[int(a), int(b)] for a, b, _ in facet_lines], dtype=np.int64).reshape(-1, 2)
    tags = tuple(t for _, _, t in facet_lines)
    return Mesh(vertices, cells, facets, tags)
