"""Midpoint 1-to-4 subdivision with a deterministic child order, plus patch
extraction.

Child order per split of triangle (v0, v1, v2): child k (k = 0, 1, 2) is the
corner triangle at vertex k, child 3 is the central triangle. A leaf face's
child path is the base-4 digit string of its index within its base face,
most significant digit first, so ascending leaf index is exactly child-path
lexicographic order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..mesh_core import MeshError, TriMesh

PATCH_LEVEL = 3
PATCH_FACES = 4**PATCH_LEVEL  # 64
PATCH_VERTICES = (2**PATCH_LEVEL + 1) * (2**PATCH_LEVEL + 2) // 2  # 45


@dataclass
class RemeshedMesh:
    leaf_mesh: TriMesh
    level: int  # number of 1-to-4 subdivisions applied
    base_face_count: int

    def __post_init__(self):
        expected = 4**self.level * self.base_face_count
        if self.leaf_mesh.n_faces != expected:
            raise MeshError(
                f"leaf mesh has {self.leaf_mesh.n_faces} faces, "
                f"expected 4^{self.level} * {self.base_face_count} = {expected}"
            )

    def base_face_id(self, leaf_id: int) -> int:
        return leaf_id // 4**self.level

    def child_path(self, leaf_id: int) -> str:
        local = leaf_id % 4**self.level
        digits = []
        for t in range(self.level - 1, -1, -1):
            digits.append(str((local >> (2 * t)) & 3))
        return "".join(digits)

    def hierarchy_dict(self) -> dict:
        """Sidecar-JSON form: {T, base_face_count, leaves: [[base_id, path], ...]}."""
        return {
            "T": self.level,
            "base_face_count": self.base_face_count,
            "leaves": [
                [self.base_face_id(i), self.child_path(i)]
                for i in range(self.leaf_mesh.n_faces)
            ],
        }


@dataclass
class Patch:
    base_face_id: int
    leaf_face_ids: np.ndarray  # (64,) child-path lexicographic order
    vertex_ids: np.ndarray  # (45,) barycentric row-major order

    def __post_init__(self):
        if len(self.leaf_face_ids) != PATCH_FACES:
            raise MeshError(f"patch must have {PATCH_FACES} leaf faces")
        if len(self.vertex_ids) != PATCH_VERTICES or \
                len(np.unique(self.vertex_ids)) != PATCH_VERTICES:
            raise MeshError(f"patch must have {PATCH_VERTICES} distinct vertices")


def _subdivide_once(mesh: TriMesh) -> TriMesh:
    v = mesh.vertices
    f = mesh.faces
    # Deduplicate edge midpoints so the result stays watertight.
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e_sorted = np.sort(e, axis=1)
    uniq, inverse = np.unique(e_sorted, axis=0, return_inverse=True)
    midpoints = 0.5 * (v[uniq[:, 0]] + v[uniq[:, 1]])
    mid_id = inverse.reshape(3, -1).T + len(v)  # (F, 3): m01, m12, m20
    m01, m12, m20 = mid_id[:, 0], mid_id[:, 1], mid_id[:, 2]
    v0, v1, v2 = f[:, 0], f[:, 1], f[:, 2]
    children = np.stack(
        [
            np.stack([v0, m01, m20], axis=1),  # corner at v0
            np.stack([m01, v1, m12], axis=1),  # corner at v1
            np.stack([m20, m12, v2], axis=1),  # corner at v2
            np.stack([m01, m12, m20], axis=1),  # center
        ],
        axis=1,
    ).reshape(-1, 3)
    return TriMesh(np.vstack([v, midpoints]), children, name=mesh.name)


def subdivide_1to4(base, T: int = 3) -> RemeshedMesh:
    """Apply T rounds of midpoint subdivision to a base mesh.

    Accepts a BaseMesh (from simplify_qem) or a bare TriMesh.
    """
    if T < 0:
        raise MeshError(f"subdivision level must be >= 0, got {T}")
    mesh = base.mesh if hasattr(base, "mesh") else base
    out = mesh.copy()
    for _ in range(T):
        out = _subdivide_once(out)
    return RemeshedMesh(leaf_mesh=out, level=T, base_face_count=mesh.n_faces)


def _corner_barycentrics(level: int) -> np.ndarray:
    """Integer barycentric coords (denominator 2^level) of every leaf corner.

    Returns (4^level, 3, 3): per local leaf (in child-path order), per corner,
    the (i, j, k) weights of the base-face corners.
    """
    tris = [np.eye(3, dtype=np.int64) * 2**level]
    for _ in range(level):
        nxt = []
        for a, b, c in ((t[0], t[1], t[2]) for t in tris):
            mab, mbc, mca = (a + b) // 2, (b + c) // 2, (c + a) // 2
            nxt.extend(
                [
                    np.stack([a, mab, mca]),
                    np.stack([mab, b, mbc]),
                    np.stack([mca, mbc, c]),
                    np.stack([mab, mbc, mca]),
                ]
            )
        tris = nxt
    return np.stack(tris)


def _patch_vertex_pointers(level: int):
    """For each grid vertex of a subdivided face, in row-major barycentric
    order, the (local_leaf, corner) where it first appears.

    Row-major: rows by decreasing weight of corner 0, within a row by
    decreasing weight of corner 1.
    """
    bary = _corner_barycentrics(level)
    first = {}
    for leaf in range(bary.shape[0]):
        for corner in range(3):
            key = tuple(bary[leaf, corner])
            if key not in first:
                first[key] = (leaf, corner)
    ordered = sorted(first, key=lambda ijk: (-ijk[0], -ijk[1]))
    return np.asarray([first[k] for k in ordered], dtype=np.int64)


_POINTER_CACHE: dict[int, np.ndarray] = {}


def patchify(remeshed: RemeshedMesh) -> list[Patch]:
    """Split a level-3 remesh into one 64-face / 45-vertex patch per base face."""
    if remeshed.level != PATCH_LEVEL:
        raise MeshError(
            f"patchify supports only T = {PATCH_LEVEL} "
            f"(64-face/45-vertex patches), got T = {remeshed.level}"
        )
    if PATCH_LEVEL not in _POINTER_CACHE:
        _POINTER_CACHE[PATCH_LEVEL] = _patch_vertex_pointers(PATCH_LEVEL)
    ptr = _POINTER_CACHE[PATCH_LEVEL]
    faces = remeshed.leaf_mesh.faces
    patches = []
    for b in range(remeshed.base_face_count):
        leaf_ids = np.arange(b * PATCH_FACES, (b + 1) * PATCH_FACES, dtype=np.int64)
        block = faces[leaf_ids]
        vertex_ids = block[ptr[:, 0], ptr[:, 1]]
        patches.append(Patch(base_face_id=b, leaf_face_ids=leaf_ids,
                             vertex_ids=vertex_ids))
    return patches
