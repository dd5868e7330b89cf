"""Finite-element layer: hexahedral meshes, Lagrange spaces, assembly and lifting."""
from .assembly import (
    Assembler,
    AssemblyError,
    assemble,
    assembler_for,
    dirichlet_lifting,
    evaluate_field_at_quadrature,
    norm_matrix,
    sampled_assembly,
)
from .mesh import Mesh, MeshError, build_box_mesh, face_rules, read_mesh, write_mesh
from .problems import ParametricData, heat_data, heat_mesh, stokes_data, stokes_mesh
from .space import FESpace, SpaceError

__all__ = [
    "Assembler", "AssemblyError", "assemble", "assembler_for", "dirichlet_lifting",
    "evaluate_field_at_quadrature", "norm_matrix", "sampled_assembly", "Mesh", "MeshError",
    "build_box_mesh", "face_rules", "read_mesh", "write_mesh", "ParametricData", "heat_data",
    "heat_mesh", "stokes_data", "stokes_mesh", "FESpace", "SpaceError",
]
