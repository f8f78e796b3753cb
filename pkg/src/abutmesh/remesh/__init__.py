"""Hierarchical remeshing: repair -> QEM simplify -> 1-to-4 subdivide ->
project back to the scan surface -> 64-face/45-vertex patches."""

import json

from .qem import BaseMesh, SimplifyError, simplify_qem
from .repair import RepairError, fill_holes, repair_to_manifold
from .project import (closest_point_on_triangles, nearest_on_surface,
                      nearest_on_surface_brute, project_to_surface)
from .subdivide import (PATCH_FACES, PATCH_LEVEL, PATCH_VERTICES, Patch,
                        RemeshedMesh, patchify, subdivide_1to4)
from ..mesh_core import TriMesh, load_mesh, save_mesh


def remesh_pipeline(mesh, target: int = 500, level: int = 3) -> RemeshedMesh:
    """repair -> simplify -> subdivide -> project, in one call."""
    repaired = repair_to_manifold(mesh)
    base = simplify_qem(repaired, target=target)
    remeshed = subdivide_1to4(base, T=level)
    return project_to_surface(remeshed, mesh)


def save_remeshed(remeshed: RemeshedMesh, off_path, hierarchy_path) -> None:
    save_mesh(remeshed.leaf_mesh, off_path)
    with open(hierarchy_path, "w") as fh:
        json.dump(remeshed.hierarchy_dict(), fh)


def load_remeshed(off_path, hierarchy_path) -> RemeshedMesh:
    leaf = load_mesh(off_path)
    with open(hierarchy_path) as fh:
        info = json.load(fh)
    return RemeshedMesh(leaf_mesh=leaf, level=info["T"],
                        base_face_count=info["base_face_count"])


__all__ = [
    "BaseMesh", "Patch", "RemeshedMesh", "RepairError", "SimplifyError",
    "PATCH_FACES", "PATCH_LEVEL", "PATCH_VERTICES",
    "closest_point_on_triangles", "fill_holes", "load_remeshed",
    "nearest_on_surface", "nearest_on_surface_brute", "patchify",
    "project_to_surface", "remesh_pipeline", "repair_to_manifold",
    "save_remeshed", "simplify_qem", "subdivide_1to4",
]
