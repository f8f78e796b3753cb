"""13-dim per-face features, ordered per-patch feature blocks, and the
pretraining mesh augmentations.

Feature layout per face:
    [0]     area (mm^2)
    [1:4]   unit face normal
    [4:7]   interior angles (radians, per face-vertex order)
    [7:10]  face centroid (mm)
    [10:13] dot(face normal, vertex normal) per face vertex, in face order
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh_core import MeshError, TriMesh, face_geometry, vertex_normals
from .remesh.subdivide import PATCH_FACES, Patch, RemeshedMesh

FEATURE_DIM = 13
BLOCK_DIM = PATCH_FACES * FEATURE_DIM  # 832


@dataclass
class PatchBlock:
    """Flattened 64x13 feature matrix plus the patch position (centroid of
    the 64 face centers, mm)."""

    features: np.ndarray  # (832,)
    position: np.ndarray  # (3,)


@dataclass
class AugmentConfig:
    scale_range: tuple[float, float] = (0.9, 1.1)
    rotation_range: float = np.pi  # radians, about the vertical (z) axis
    deform_amplitude: float = 0.5  # mm
    deform_frequency: float = 0.1  # 1/mm
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError(f"bad scale_range {self.scale_range}")
        if self.deform_amplitude < 0:
            raise ValueError("deform_amplitude must be >= 0")


def center_mesh(mesh: TriMesh) -> TriMesh:
    """Translate so the vertex centroid sits at the origin (no rescaling:
    regression targets are physical lengths)."""
    return TriMesh(mesh.vertices - mesh.vertices.mean(axis=0),
                   mesh.faces.copy(), name=mesh.name)


def face_features_13d(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Per-face 13-dim features. Returns (features (F,13), valid (F,));
    rows for degenerate faces are zero and flagged invalid."""
    geo = face_geometry(mesh)
    vn = vertex_normals(mesh)
    dots = np.einsum("fj,fkj->fk", geo.unit_normal, vn[mesh.faces])
    feats = np.concatenate(
        [
            geo.area[:, None],
            geo.unit_normal,
            geo.interior_angles,
            geo.center,
            np.clip(dots, -1.0, 1.0),
        ],
        axis=1,
    )
    feats[~geo.valid] = 0.0
    return feats, geo.valid


def assemble_patch_blocks(remeshed: RemeshedMesh,
                          patches: list[Patch]) -> list[PatchBlock]:
    """One 832-vector plus one 3-vector position per patch, in patch order."""
    feats, valid = face_features_13d(remeshed.leaf_mesh)
    blocks = []
    for patch in patches:
        expected = np.arange(patch.base_face_id * PATCH_FACES,
                             (patch.base_face_id + 1) * PATCH_FACES)
        if not np.array_equal(patch.leaf_face_ids, expected):
            raise MeshError(
                f"patch {patch.base_face_id}: leaf faces are not in canonical "
                "child-path order"
            )
        if not valid[patch.leaf_face_ids].all():
            bad = patch.leaf_face_ids[~valid[patch.leaf_face_ids]][0]
            raise MeshError(f"degenerate leaf face {bad} has no valid features")
        rows = feats[patch.leaf_face_ids].copy()  # (64, 13)
        position = rows[:, 7:10].mean(axis=0)
        # face centers are stored relative to the patch center: tokens become
        # translation-invariant and global placement enters via the position
        rows[:, 7:10] -= position
        blocks.append(PatchBlock(features=rows.reshape(-1),
                                 position=position))
    return blocks


def _rng_for(cfg: AugmentConfig, salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, salt]))


def augment(mesh: TriMesh, cfg: AugmentConfig, mode: str = "all") -> TriMesh:
    """Seeded mesh augmentation; connectivity is never changed.

    modes: "scale" (uniform about the centroid), "rotate" (about the vertical
    axis through the centroid), "deform" (sinusoidal displacement along vertex
    normals), "all".
    """
    if mode not in ("scale", "rotate", "deform", "all"):
        raise ValueError(f"unknown augment mode {mode!r}")
    v = mesh.vertices.copy()
    centroid = v.mean(axis=0)
    if mode in ("scale", "all"):
        rng = _rng_for(cfg, 1)
        s = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
        v = centroid + s * (v - centroid)
    if mode in ("rotate", "all"):
        rng = _rng_for(cfg, 2)
        theta = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
        c, s = np.cos(theta), np.sin(theta)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        v = centroid + (v - centroid) @ R.T
    if mode in ("deform", "all") and cfg.deform_amplitude > 0:
        normals = vertex_normals(TriMesh(v, mesh.faces))
        k = cfg.deform_frequency
        amp = cfg.deform_amplitude * np.sin(k * v[:, 0]) * np.sin(k * v[:, 1])
        v = v + amp[:, None] * normals
    return TriMesh(v, mesh.faces.copy(), name=mesh.name)
