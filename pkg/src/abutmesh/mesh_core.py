"""Triangle mesh data model, OFF/OBJ I/O, validation and per-face geometry.

Vertices are in millimeters. Faces are ordered vertex-index triples whose
winding defines the outward normal (right-hand rule).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

DEGENERATE_AREA = 1e-12  # mm^2; faces below this are treated as degenerate


class MeshError(Exception):
    """Base class for mesh-related failures."""


class MeshParseError(MeshError):
    """Raised when a mesh file cannot be parsed; carries the line number."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class MeshInvariantError(MeshError):
    """Raised when a TriMesh violates a structural invariant."""


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3) float64, mm
    faces: np.ndarray  # (F, 3) int64
    name: str | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshInvariantError(f"vertices must be (V,3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshInvariantError(f"faces must be (F,3), got {self.faces.shape}")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def check_indices(self):
        """Raise if any face references a missing or repeated vertex."""
        if self.n_faces == 0:
            return
        if self.faces.min(initial=0) < 0 or self.faces.max(initial=-1) >= self.n_vertices:
            bad = np.where((self.faces < 0) | (self.faces >= self.n_vertices))[0][0]
            raise MeshInvariantError(
                f"face {bad} references vertex outside [0, {self.n_vertices})"
            )
        f = self.faces
        repeated = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if repeated.any():
            raise MeshInvariantError(
                f"face {np.where(repeated)[0][0]} references the same vertex twice"
            )

    def copy(self) -> "TriMesh":
        return TriMesh(self.vertices.copy(), self.faces.copy(), self.name)


@dataclass
class ValidationReport:
    is_manifold: bool
    is_watertight: bool
    boundary_edge_count: int
    non_manifold_edge_count: int
    degenerate_face_count: int
    euler_characteristic: int


@dataclass
class FaceGeometry:
    area: np.ndarray  # (F,) mm^2
    unit_normal: np.ndarray  # (F, 3)
    center: np.ndarray  # (F, 3) mm
    interior_angles: np.ndarray  # (F, 3) radians, per face-vertex order
    valid: np.ndarray  # (F,) bool, False for degenerate faces


def load_mesh(path) -> TriMesh:
    """Load an ASCII OFF or OBJ file. OBJ polygons are fan-triangulated."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise MeshError(f"no such file: {path}")
    ext = os.path.splitext(path)[1].lower()
    if ext == ".off":
        mesh = _load_off(path)
    elif ext == ".obj":
        mesh = _load_obj(path)
    else:
        raise MeshError(f"unsupported mesh extension {ext!r} (expected .off or .obj)")
    mesh.check_indices()
    return mesh


def _load_off(path) -> TriMesh:
    with open(path) as fh:
        lines = fh.readlines()
    # Strip comments and blanks, keeping original line numbers for errors.
    tokens = []
    for no, raw in enumerate(lines, start=1):
        body = raw.split("#", 1)[0].strip()
        if body:
            tokens.append((no, body))
    if not tokens:
        raise MeshParseError(path, 1, "empty OFF file")
    idx = 0
    no, header = tokens[idx]
    if header == "OFF":
        idx += 1
        if idx >= len(tokens):
            raise MeshParseError(path, no, "missing counts line")
        no, counts_line = tokens[idx]
    elif header.startswith("OFF"):
        counts_line = header[3:].strip()  # counts on the header line
    else:
        raise MeshParseError(path, no, f"expected OFF header, got {header!r}")
    idx += 1
    parts = counts_line.split()
    if len(parts) < 2:
        raise MeshParseError(path, no, f"bad counts line {counts_line!r}")
    try:
        nv, nf = int(parts[0]), int(parts[1])
    except ValueError:
        raise MeshParseError(path, no, f"bad counts line {counts_line!r}") from None

    if idx + nv + nf > len(tokens):
        raise MeshParseError(path, len(lines), "truncated OFF file")
    verts = np.empty((nv, 3))
    for i in range(nv):
        no, line = tokens[idx + i]
        parts = line.split()
        if len(parts) < 3:
            raise MeshParseError(path, no, f"bad vertex line {line!r}")
        try:
            verts[i] = [float(parts[0]), float(parts[1]), float(parts[2])]
        except ValueError:
            raise MeshParseError(path, no, f"bad vertex line {line!r}") from None
    faces = np.empty((nf, 3), dtype=np.int64)
    for i in range(nf):
        no, line = tokens[idx + nv + i]
        parts = line.split()
        try:
            cnt = int(parts[0])
        except (ValueError, IndexError):
            raise MeshParseError(path, no, f"bad face line {line!r}") from None
        if cnt != 3:
            raise MeshParseError(path, no, f"non-triangle face with {cnt} vertices")
        if len(parts) < 4:
            raise MeshParseError(path, no, f"bad face line {line!r}")
        faces[i] = [int(parts[1]), int(parts[2]), int(parts[3])]
    return TriMesh(verts, faces, name=os.path.basename(path))


def _load_obj(path) -> TriMesh:
    verts = []
    faces = []
    with open(path) as fh:
        for no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshParseError(path, no, f"bad vertex line {raw.strip()!r}")
                try:
                    verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError:
                    raise MeshParseError(path, no, f"bad vertex line {raw.strip()!r}") from None
            elif parts[0] == "f":
                idxs = []
                for tok in parts[1:]:
                    head = tok.split("/", 1)[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise MeshParseError(path, no, f"bad face token {tok!r}") from None
                    # OBJ indices are 1-based; negatives count from the end.
                    idxs.append(i - 1 if i > 0 else len(verts) + i)
                if len(idxs) < 3:
                    raise MeshParseError(path, no, "face with fewer than 3 vertices")
                # Fan triangulation from the first vertex.
                for k in range(1, len(idxs) - 1):
                    faces.append([idxs[0], idxs[k], idxs[k + 1]])
            # other OBJ records (vn, vt, usemtl, ...) are ignored
    if not verts:
        raise MeshParseError(path, 1, "OBJ file has no vertices")
    return TriMesh(
        np.asarray(verts, dtype=np.float64),
        np.asarray(faces, dtype=np.int64).reshape(-1, 3),
        name=os.path.basename(path),
    )


def save_mesh(mesh: TriMesh, path) -> None:
    """Write OFF or OBJ (by extension). Round-trips vertices to 6 decimals."""
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext not in (".off", ".obj"):
        raise MeshError(f"unsupported mesh extension {ext!r} (expected .off or .obj)")
    try:
        with open(path, "w") as fh:
            if ext == ".off":
                fh.write("OFF\n")
                fh.write(f"{mesh.n_vertices} {mesh.n_faces} 0\n")
                for v in mesh.vertices:
                    fh.write(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
                for f in mesh.faces:
                    fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")
            else:
                for v in mesh.vertices:
                    fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
                for f in mesh.faces:
                    fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
    except OSError as exc:
        raise MeshError(f"cannot write {path}: {exc}") from exc


def edge_incidence(faces: np.ndarray):
    """Undirected edge list and per-edge face-incidence counts.

    Returns (edges (E,2) with sorted endpoints, counts (E,)).
    """
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    edges, counts = np.unique(e, axis=0, return_counts=True)
    return edges, counts


def validate(mesh: TriMesh) -> ValidationReport:
    """Edge-incidence based manifold/watertight report. Always returns."""
    mesh.check_indices()
    if mesh.n_faces == 0:
        return ValidationReport(True, False, 0, 0, 0, mesh.n_vertices)
    edges, counts = edge_incidence(mesh.faces)
    boundary = int((counts == 1).sum())
    nonmanifold = int((counts > 2).sum())
    geo = face_geometry(mesh)
    degenerate = int((~geo.valid).sum())
    euler = mesh.n_vertices - len(edges) + mesh.n_faces
    return ValidationReport(
        is_manifold=nonmanifold == 0,
        is_watertight=boundary == 0 and nonmanifold == 0,
        boundary_edge_count=boundary,
        non_manifold_edge_count=nonmanifold,
        degenerate_face_count=degenerate,
        euler_characteristic=euler,
    )


def face_geometry(mesh: TriMesh) -> FaceGeometry:
    """Per-face area, unit normal, centroid and interior angles (vectorized)."""
    v = mesh.vertices
    f = mesh.faces
    p0, p1, p2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    cross = np.cross(p1 - p0, p2 - p0)
    double_area = np.linalg.norm(cross, axis=1)
    area = 0.5 * double_area
    valid = area > DEGENERATE_AREA
    safe = np.where(valid, double_area, 1.0)
    normal = cross / safe[:, None]
    normal[~valid] = 0.0
    center = (p0 + p1 + p2) / 3.0

    def angle(a, b):
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        denom = np.where((na > 0) & (nb > 0), na * nb, 1.0)
        c = np.clip(np.einsum("ij,ij->i", a, b) / denom, -1.0, 1.0)
        return np.arccos(c)

    ang = np.stack(
        [
            angle(p1 - p0, p2 - p0),
            angle(p2 - p1, p0 - p1),
            angle(p0 - p2, p1 - p2),
        ],
        axis=1,
    )
    ang[~valid] = 0.0
    return FaceGeometry(area=area, unit_normal=normal, center=center,
                        interior_angles=ang, valid=valid)


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted vertex normals, unit length; zero for isolated vertices."""
    geo = face_geometry(mesh)
    acc = np.zeros_like(mesh.vertices)
    # area-weighted: the raw cross product already carries the area weight
    weighted = geo.unit_normal * geo.area[:, None]
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], weighted)
    norms = np.linalg.norm(acc, axis=1)
    out = np.zeros_like(acc)
    nz = norms > 0
    out[nz] = acc[nz] / norms[nz, None]
    return out
