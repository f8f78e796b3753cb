"""End-to-end mesh preprocessing: center -> repair -> simplify -> subdivide ->
project -> patchify -> feature/target tensors, with an on-disk cache."""

from __future__ import annotations

import hashlib
import os

import numpy as np

from .datagen import Sample
from .features import center_mesh
from .mae import MeshSample, build_recon_tensors
from .mesh_core import TriMesh, load_mesh
from .remesh import patchify, remesh_pipeline

PREPROC_VERSION = 2  # v2: patch-relative face centers in feature blocks


def preprocess_mesh(mesh: TriMesh, target: int = 500) -> MeshSample:
    centered = center_mesh(mesh)
    remeshed = remesh_pipeline(centered, target=target)
    patches = patchify(remeshed)
    patch_vertex_ids = np.stack([p.vertex_ids for p in patches])
    feats, pos, rel, ff = build_recon_tensors(remeshed.leaf_mesh, patch_vertex_ids)
    return MeshSample(
        leaf_vertices=remeshed.leaf_mesh.vertices,
        leaf_faces=remeshed.leaf_mesh.faces,
        patch_vertex_ids=patch_vertex_ids,
        features=feats,
        positions=pos,
        rel_vertices=rel,
        face_feats=ff,
    )


def _cache_key(mesh_path, target: int) -> str:
    h = hashlib.sha256()
    h.update(f"v{PREPROC_VERSION}/target={target}/".encode())
    with open(mesh_path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()[:24]


def preprocess_sample(sample: Sample, sample_id: int = 0, target: int = 500,
                      cache_dir=None) -> MeshSample:
    """Preprocess one manifest sample, reusing the cache when possible."""
    cache_path = None
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        cache_path = os.path.join(
            cache_dir, _cache_key(sample.mesh_path, target) + ".npz")
    if cache_path and os.path.exists(cache_path):
        data = np.load(cache_path)
        ms = MeshSample(
            leaf_vertices=data["leaf_vertices"],
            leaf_faces=data["leaf_faces"],
            patch_vertex_ids=data["patch_vertex_ids"],
            features=data["features"],
            positions=data["positions"],
            rel_vertices=data["rel_vertices"],
            face_feats=data["face_feats"],
        )
    else:
        ms = preprocess_mesh(load_mesh(sample.mesh_path), target=target)
        if cache_path:
            np.savez_compressed(
                cache_path,
                leaf_vertices=ms.leaf_vertices,
                leaf_faces=ms.leaf_faces,
                patch_vertex_ids=ms.patch_vertex_ids,
                features=ms.features,
                positions=ms.positions,
                rel_vertices=ms.rel_vertices,
                face_feats=ms.face_feats,
            )
    ms.sample_id = sample_id
    ms.labels = sample.labels
    ms.jaw = sample.jaw
    ms.fdi = sample.fdi_index
    return ms


def preprocess_manifest(manifest, target: int = 500, cache_dir=None,
                        on_error: str = "raise") -> tuple[list, list]:
    """Preprocess every sample; returns (mesh_samples, failures).

    on_error = "collect" records failures and continues on the rest.
    """
    out, failures = [], []
    for i, sample in enumerate(manifest.samples):
        try:
            out.append(preprocess_sample(sample, sample_id=i, target=target,
                                         cache_dir=cache_dir))
        except Exception as exc:
            if on_error != "collect":
                raise
            failures.append((sample.mesh_path, str(exc)))
    return out, failures
