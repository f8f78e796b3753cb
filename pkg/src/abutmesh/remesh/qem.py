"""Quadric-error-metric edge-collapse simplification to a ~500-face base mesh.

Collapses one edge at a time (each interior-edge collapse removes exactly two
faces), rejecting collapses that would break manifoldness, flip face normals
or create degenerate faces. Ties in collapse cost are broken by the lower
edge insertion index so runs are bit-deterministic.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from ..mesh_core import DEGENERATE_AREA, MeshError, TriMesh, validate

BASE_FACE_MIN = 496
BASE_FACE_MAX = 500


class SimplifyError(MeshError):
    def __init__(self, message, best_face_count=None):
        super().__init__(message)
        self.best_face_count = best_face_count


@dataclass
class BaseMesh:
    """Simplified watertight base mesh with face count M in [496, 500]."""

    mesh: TriMesh
    face_count: int

    def __post_init__(self):
        if not (BASE_FACE_MIN <= self.face_count <= BASE_FACE_MAX):
            raise SimplifyError(
                f"base mesh face count {self.face_count} outside "
                f"[{BASE_FACE_MIN}, {BASE_FACE_MAX}]",
                best_face_count=self.face_count,
            )


def _face_quadrics(verts, faces):
    p0, p1, p2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    cross = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(cross, axis=1)
    area = 0.5 * norm
    safe = np.where(norm > 0, norm, 1.0)
    n = cross / safe[:, None]
    d = -np.einsum("ij,ij->i", n, p0)
    plane = np.concatenate([n, d[:, None]], axis=1)  # (F,4)
    K = plane[:, :, None] * plane[:, None, :]
    return K * area[:, None, None]


def _optimal_position(Q, pu, pv):
    """Best collapse target among the quadric optimum, endpoints and midpoint."""
    candidates = [pu, pv, 0.5 * (pu + pv)]
    A = Q[:3, :3]
    b = Q[:3, 3]
    try:
        sol = np.linalg.solve(A + 1e-9 * np.eye(3), -b)
        if np.all(np.isfinite(sol)):
            candidates.insert(0, sol)
    except np.linalg.LinAlgError:
        pass
    best, best_cost = None, np.inf
    for p in candidates:
        h = np.array([p[0], p[1], p[2], 1.0])
        cost = float(h @ Q @ h)
        if cost < best_cost:
            best, best_cost = p, cost
    return best, max(best_cost, 0.0)


def simplify_qem(mesh: TriMesh, target: int = 500) -> BaseMesh:
    """Simplify a watertight manifold mesh until face count first reaches <= target."""
    report = validate(mesh)
    if not report.is_watertight:
        raise SimplifyError(
            f"simplify_qem needs a watertight manifold input "
            f"(boundary edges: {report.boundary_edge_count}, "
            f"non-manifold edges: {report.non_manifold_edge_count})"
        )
    if mesh.n_faces < BASE_FACE_MIN:
        raise SimplifyError(
            f"input has {mesh.n_faces} faces, below the minimum {BASE_FACE_MIN}",
            best_face_count=mesh.n_faces,
        )
    if mesh.n_faces <= target:
        return BaseMesh(mesh.copy(), mesh.n_faces)

    verts = mesh.vertices.copy()
    faces = [tuple(f) for f in mesh.faces.tolist()]
    face_alive = [True] * len(faces)
    n_alive = len(faces)

    vert_faces: list[set] = [set() for _ in range(len(verts))]
    for fi, f in enumerate(faces):
        for vi in f:
            vert_faces[vi].add(fi)

    K = _face_quadrics(verts, np.asarray(mesh.faces))
    Q = np.zeros((len(verts), 4, 4))
    for fi, f in enumerate(faces):
        for vi in f:
            Q[vi] += K[fi]

    version = [0] * len(verts)
    heap: list = []
    next_edge_id = 0

    def push_edge(u, v):
        nonlocal next_edge_id
        if u > v:
            u, v = v, u
        pos, cost = _optimal_position(Q[u] + Q[v], verts[u], verts[v])
        heapq.heappush(heap, (cost, next_edge_id, u, v, version[u], version[v], tuple(pos)))
        next_edge_id += 1

    seen = set()
    for f in faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            key = (a, b) if a < b else (b, a)
            if key not in seen:
                seen.add(key)
                push_edge(*key)
    del seen

    def neighbors(u):
        out = set()
        for fi in vert_faces[u]:
            out.update(faces[fi])
        out.discard(u)
        return out

    while n_alive > target and heap:
        cost, _eid, u, v, ver_u, ver_v, pos = heapq.heappop(heap)
        if version[u] != ver_u or version[v] != ver_v:
            continue
        shared_faces = vert_faces[u] & vert_faces[v]
        if len(shared_faces) != 2:
            continue  # not an interior manifold edge anymore
        # Link condition: shared vertex neighbors must be exactly the two
        # vertices opposite the collapsing edge.
        opposite = set()
        for fi in shared_faces:
            for vi in faces[fi]:
                if vi != u and vi != v:
                    opposite.add(vi)
        if neighbors(u) & neighbors(v) != opposite:
            continue

        new_pos = np.asarray(pos)
        # Normal-flip / degeneracy check on every surviving incident face.
        flipped = False
        surviving = (vert_faces[u] | vert_faces[v]) - shared_faces
        for fi in surviving:
            tri = faces[fi]
            old = [verts[i] for i in tri]
            new = [new_pos if (i == u or i == v) else verts[i] for i in tri]
            n_old = np.cross(old[1] - old[0], old[2] - old[0])
            n_new = np.cross(new[1] - new[0], new[2] - new[0])
            if np.linalg.norm(n_new) < 2 * DEGENERATE_AREA or float(n_old @ n_new) <= 0:
                flipped = True
                break
        if flipped:
            continue

        # Apply the collapse: v merges into u at new_pos.
        verts[u] = new_pos
        Q[u] = Q[u] + Q[v]
        for fi in shared_faces:
            face_alive[fi] = False
            n_alive -= 1
            for vi in faces[fi]:
                vert_faces[vi].discard(fi)
        for fi in list(vert_faces[v]):
            tri = faces[fi]
            faces[fi] = tuple(u if i == v else i for i in tri)
            vert_faces[v].discard(fi)
            vert_faces[u].add(fi)
        version[u] += 1
        version[v] += 1
        for w in sorted(neighbors(u)):
            push_edge(u, w)

    if n_alive > target:
        raise SimplifyError(
            f"ran out of legal collapses at {n_alive} faces (target {target})",
            best_face_count=n_alive,
        )

    out_faces = np.asarray([faces[i] for i in range(len(faces)) if face_alive[i]],
                           dtype=np.int64)
    used = np.unique(out_faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    result = TriMesh(verts[used], remap[out_faces], name=mesh.name)
    if n_alive < BASE_FACE_MIN:
        raise SimplifyError(
            f"overshot the face-count window: landed at {n_alive}",
            best_face_count=n_alive,
        )
    return BaseMesh(result, n_alive)
