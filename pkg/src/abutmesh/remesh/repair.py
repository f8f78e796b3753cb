"""Mesh repair: drop non-manifold and degenerate faces, orient consistently,
and fill small boundary loops by centroid fans."""

from __future__ import annotations

import numpy as np

from ..mesh_core import MeshError, TriMesh, face_geometry, validate

MAX_HOLE_EDGES = 32


class RepairError(MeshError):
    """Raised when a mesh defect cannot be repaired; names the defect."""


def _drop_bad_faces(mesh: TriMesh) -> TriMesh:
    geo = face_geometry(mesh)
    keep = geo.valid.copy()
    # Faces touching an over-shared (non-manifold) edge are removed wholesale.
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.sort(e, axis=1)
    uniq, inverse, counts = np.unique(e, axis=0, return_inverse=True,
                                      return_counts=True)
    bad_edge = counts > 2
    face_has_bad = bad_edge[inverse].reshape(3, -1).any(axis=0)
    keep &= ~face_has_bad
    return TriMesh(mesh.vertices.copy(), f[keep], name=mesh.name)


def _orient_consistently(mesh: TriMesh) -> TriMesh:
    """Flip faces so every shared edge is traversed in opposite directions.

    Raises RepairError("non-orientable ...") when no consistent assignment
    exists (e.g. a Moebius-like strip).
    """
    f = mesh.faces.copy()
    n = len(f)
    edge_faces: dict[tuple, list] = {}
    for fi in range(n):
        for a, b in ((f[fi, 0], f[fi, 1]), (f[fi, 1], f[fi, 2]), (f[fi, 2], f[fi, 0])):
            key = (a, b) if a < b else (b, a)
            edge_faces.setdefault(key, []).append(fi)

    flipped = np.zeros(n, dtype=bool)
    visited = np.zeros(n, dtype=bool)

    def directed_edges(fi):
        tri = f[fi]
        base = [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])]
        if flipped[fi]:
            base = [(b, a) for a, b in base]
        return base

    for seed in range(n):
        if visited[seed]:
            continue
        stack = [seed]
        visited[seed] = True
        while stack:
            fi = stack.pop()
            for a, b in directed_edges(fi):
                key = (a, b) if a < b else (b, a)
                for fj in edge_faces[key]:
                    if fj == fi:
                        continue
                    # fj is consistent iff it traverses the edge as (b, a)
                    same_dir = (a, b) in directed_edges(fj)
                    if not visited[fj]:
                        visited[fj] = True
                        if same_dir:
                            flipped[fj] = ~flipped[fj]
                        stack.append(fj)
                    elif same_dir:
                        raise RepairError(
                            "non-orientable surface: faces "
                            f"{fi} and {fj} cannot be oriented consistently"
                        )
    f[flipped] = f[flipped][:, ::-1]
    return TriMesh(mesh.vertices.copy(), f, name=mesh.name)


def _boundary_loops(faces: np.ndarray) -> list[list[int]]:
    """Boundary loops as vertex cycles, following face winding."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    key = np.sort(e, axis=1)
    uniq, inverse, counts = np.unique(key, axis=0, return_inverse=True,
                                      return_counts=True)
    boundary = counts[inverse] == 1
    # Boundary edges run opposite to the face winding so the fill keeps
    # orientation: a face edge (a, b) on the boundary contributes loop edge b->a.
    succ = {int(b): int(a) for a, b in e[boundary]}
    loops = []
    while succ:
        start, cur = next(iter(succ.items()))
        loop = [start]
        while True:
            nxt = succ.pop(loop[-1], None)
            if nxt is None:
                raise RepairError("open boundary chain: boundary does not close")
            if nxt == start:
                break
            loop.append(nxt)
        loops.append(loop)
    return loops


def fill_holes(mesh: TriMesh, max_edges: int = MAX_HOLE_EDGES) -> TriMesh:
    """Fill each boundary loop of <= max_edges edges with a centroid fan."""
    loops = _boundary_loops(mesh.faces)
    if not loops:
        return mesh
    verts = [mesh.vertices]
    new_faces = []
    next_vid = mesh.n_vertices
    for loop in loops:
        if len(loop) > max_edges:
            raise RepairError(
                f"boundary loop with {len(loop)} edges exceeds the "
                f"{max_edges}-edge hole-fill limit"
            )
        centroid = mesh.vertices[loop].mean(axis=0)
        verts.append(centroid[None, :])
        for i in range(len(loop)):
            a, b = loop[i], loop[(i + 1) % len(loop)]
            new_faces.append([a, b, next_vid])
        next_vid += 1
    faces = np.vstack([mesh.faces, np.asarray(new_faces, dtype=np.int64)])
    return TriMesh(np.vstack(verts), faces, name=mesh.name)


def repair_to_manifold(mesh: TriMesh) -> TriMesh:
    """Repair to a watertight, consistently oriented manifold or raise."""
    report = validate(mesh)
    if report.is_watertight and report.degenerate_face_count == 0:
        return mesh.copy()
    out = _drop_bad_faces(mesh)
    out = _orient_consistently(out)
    out = fill_holes(out)
    final = validate(out)
    if not final.is_watertight:
        raise RepairError(
            "repair failed: "
            f"{final.boundary_edge_count} boundary edges and "
            f"{final.non_manifold_edge_count} non-manifold edges remain"
        )
    return out
