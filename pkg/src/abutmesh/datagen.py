"""Synthetic two-jaw occlusal meshes with a missing-tooth implant site whose
transgingival depth, socket diameter and occlusal gap are known by
construction.

Each jaw is a watertight heightfield slab: a flat gum plateau carrying one
compact tooth bump per slot, a socket depression at the missing slot (on the
socket jaw) and a flat-topped opposing tooth (on the other jaw). The socket
wall is a tanh profile whose half-depth level set has exactly the requested
diameter, and noise is masked out around the site so the labels stay
measurable on the raw mesh.

The parameters also shape the arch globally, the way patient anatomy does:
the gum plateau sits gingiva_thickness above the slab base on both jaws
(transgingival depth equals the local tissue thickness), and tooth bumps
scale with socket_diameter (implant diameter tracks the patient's tooth
size). The local socket construction stays exact, so the labels remain
measurable at the site by measure_labels.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .mesh_core import TriMesh, save_mesh

# jaw geometry constants (mm)
TOOTH_PITCH = 8.0
MARGIN = 5.0
ARCH_WIDTH = 16.0
GUM_HEIGHT = 4.0
BASE_DEPTH = 3.0
TOOTH_AMP = 3.0
TOOTH_RHO = 2.2  # compact bump support radius
WALL_W = 0.5  # socket wall softness
PLATEAU_R = 1.6  # flat top radius of the opposing tooth
SITE_FLAT_R = 6.4  # noise / bump exclusion radius around the implant site
FINE_SPACING = 0.6
COARSE_SPACING = 4.0

VALID_FDI = {q * 10 + p for q in (1, 2, 3, 4) for p in range(1, 9)}
IMPLANT_POSITIONS = (4, 5, 6, 7)  # premolars/molars


class DatagenError(ValueError):
    pass


@dataclass
class ArchSpec:
    missing_fdi: int
    gingiva_thickness_mm: float  # transgingival depth t
    socket_diameter_mm: float  # diameter d
    occlusal_gap_mm: float  # height h
    teeth_per_jaw: int = 14
    noise_amplitude_mm: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.missing_fdi not in VALID_FDI:
            raise DatagenError(f"invalid FDI code {self.missing_fdi}")
        if not (1 <= self.gingiva_thickness_mm <= 4):
            raise DatagenError(
                f"gingiva_thickness_mm {self.gingiva_thickness_mm} outside [1, 4]")
        if not (3 <= self.socket_diameter_mm <= 6):
            raise DatagenError(
                f"socket_diameter_mm {self.socket_diameter_mm} outside [3, 6]")
        if not (4 <= self.occlusal_gap_mm <= 8):
            raise DatagenError(
                f"occlusal_gap_mm {self.occlusal_gap_mm} outside [4, 8]")
        if self.noise_amplitude_mm < 0:
            raise DatagenError("noise_amplitude_mm must be >= 0")
        # socket wall must decay before the neighboring tooth bumps begin
        if (self.socket_diameter_mm / 2 + 3 * WALL_W + self.tooth_rho
                >= TOOTH_PITCH):
            raise DatagenError("socket would intersect neighboring teeth")

    @property
    def tooth_rho(self) -> float:
        """Tooth bump support radius; tooth size scales with implant size."""
        return TOOTH_RHO * self.socket_diameter_mm / 4.5

    @property
    def tooth_amp(self) -> float:
        """Tooth bump height; mild scaling keeps opposing jaws clear."""
        return TOOTH_AMP * (0.8 + 0.2 * self.socket_diameter_mm / 4.5)

    @property
    def gum_height(self) -> float:
        """Gum plateau altitude: slab base offset plus the tissue thickness."""
        return GUM_HEIGHT + self.gingiva_thickness_mm

    @property
    def labels(self) -> dict:
        return {
            "transgingival": self.gingiva_thickness_mm,
            "diameter": self.socket_diameter_mm,
            "height": self.occlusal_gap_mm,
        }


@dataclass
class Sample:
    mesh_path: str
    jaw: str  # "top" | "bottom"
    fdi_index: int
    labels: dict | None  # {transgingival, diameter, height} in mm, or None

    def to_json(self) -> dict:
        return {"mesh": self.mesh_path, "jaw": self.jaw, "fdi": self.fdi_index,
                "labels": self.labels}

    @classmethod
    def from_json(cls, rec: dict) -> "Sample":
        return cls(mesh_path=rec["mesh"], jaw=rec["jaw"], fdi_index=rec["fdi"],
                   labels=rec.get("labels"))


@dataclass
class Manifest:
    samples: list
    split: str  # "train" | "test"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for s in self.samples:
                fh.write(json.dumps(s.to_json()) + "\n")

    @classmethod
    def load(cls, path, split: str = "train") -> "Manifest":
        samples = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    samples.append(Sample.from_json(json.loads(line)))
        paths = [s.mesh_path for s in samples]
        if len(set(paths)) != len(paths):
            raise DatagenError(f"{path}: duplicate mesh paths in manifest")
        return cls(samples=samples, split=split)


def jaw_of_fdi(fdi: int) -> str:
    return "top" if fdi // 10 in (1, 2) else "bottom"


def slot_of_fdi(fdi: int, teeth_per_jaw: int) -> int:
    """Left-to-right slot index of a tooth within its jaw row."""
    nq = teeth_per_jaw // 2
    q, p = fdi // 10, fdi % 10
    if p > nq:
        raise DatagenError(f"FDI position {p} exceeds {nq} teeth per quadrant")
    if q in (1, 4):  # patient's right: slots 0 .. nq-1, distal first
        return nq - p
    return nq + p - 1  # patient's left


def _graded_axis(lo, hi, coarse, fine_center, fine_half, fine_spacing):
    """Monotone coordinate array: coarse overall, fine around fine_center,
    with the center itself always a node."""
    pts = list(np.arange(lo, hi + 1e-9, coarse))
    pts.append(hi)
    if fine_half > 0:
        a = max(lo, fine_center - fine_half)
        b = min(hi, fine_center + fine_half)
        n = max(1, int(np.ceil((b - a) / fine_spacing)))
        pts.extend(np.linspace(a, b, 2 * (n // 2) + 1))  # odd count: center hits
        pts.append(fine_center)
    pts = np.unique(np.round(np.asarray(pts), 9))
    keep = [pts[0]]
    for p in pts[1:]:
        if p - keep[-1] >= 0.45 * fine_spacing or p == pts[-1]:
            keep.append(p)
    return np.asarray(keep)


def _bump(r, amp, rho):
    u = np.clip(r / rho, 0.0, 1.0)
    return amp * (1 - u**2) ** 2


def _flat_bump(r, amp, r0, rho):
    u = np.clip((r - r0) / (rho - r0), 0.0, 1.0)
    return amp * (1 - u**2) ** 2


def _socket(r, depth, radius):
    return depth * 0.5 * (1 - np.tanh((r - radius) / WALL_W))


def _noise_field(x, y, amplitude, rng):
    if amplitude == 0:
        return np.zeros_like(x)
    out = np.zeros_like(x)
    n_terms = 4
    for _ in range(n_terms):
        wx, wy = rng.uniform(0.1, 0.4, size=2)
        px, py = rng.uniform(0, 2 * np.pi, size=2)
        out += np.sin(wx * x + px) * np.sin(wy * y + py)
    return out * (amplitude / n_terms)


def _slab(x_coords, y_coords, top_z, z_bottom) -> TriMesh:
    """Closed heightfield solid: triangulated top, perimeter walls, and a
    bottom fan around a single center vertex."""
    nx, ny = len(x_coords), len(y_coords)
    xx, yy = np.meshgrid(x_coords, y_coords, indexing="ij")
    top = np.stack([xx.ravel(), yy.ravel(), top_z.ravel()], axis=1)

    def vid(i, j):
        return i * ny + j

    faces = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            faces.append([v00, v10, v11])
            faces.append([v00, v11, v01])

    # counterclockwise (top view) perimeter of the top grid
    ring = (
        [vid(i, 0) for i in range(nx - 1)]
        + [vid(nx - 1, j) for j in range(ny - 1)]
        + [vid(i, ny - 1) for i in range(nx - 1, 0, -1)]
        + [vid(0, j) for j in range(ny - 1, 0, -1)]
    )
    n_top = len(top)
    bottom_ring = np.stack(
        [top[ring][:, 0], top[ring][:, 1], np.full(len(ring), z_bottom)], axis=1)
    center = np.array([[x_coords.mean(), y_coords.mean(), z_bottom]])
    verts = np.vstack([top, bottom_ring, center])
    center_id = len(verts) - 1
    for k in range(len(ring)):
        a, b = ring[k], ring[(k + 1) % len(ring)]
        ba, bb = n_top + k, n_top + (k + 1) % len(ring)
        faces.append([a, ba, bb])
        faces.append([a, bb, b])
        faces.append([center_id, bb, ba])
    return TriMesh(verts, np.asarray(faces, dtype=np.int64))


def _jaw_surface(spec: ArchSpec, site_x, site_y, has_socket: bool, rng):
    """(x_coords, y_coords, z) for one jaw's top surface."""
    n = spec.teeth_per_jaw
    length = 2 * MARGIN + n * TOOTH_PITCH
    fine_half = SITE_FLAT_R + 1.2 if has_socket else 3.4
    fine_spacing = FINE_SPACING if has_socket else 0.8
    xs = _graded_axis(0.0, length, COARSE_SPACING, site_x, fine_half, fine_spacing)
    ys = _graded_axis(0.0, ARCH_WIDTH, COARSE_SPACING, site_y, fine_half, fine_spacing)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    z = np.full_like(xx, spec.gum_height)

    missing_slot = slot_of_fdi(spec.missing_fdi, n)
    r_site = np.hypot(xx - site_x, yy - site_y)
    for s in range(n):
        if s == missing_slot:
            continue
        cx = MARGIN + (s + 0.5) * TOOTH_PITCH
        z += _bump(np.hypot(xx - cx, yy - site_y), spec.tooth_amp,
                   spec.tooth_rho)
    if has_socket:
        z -= _socket(r_site, spec.gingiva_thickness_mm,
                     spec.socket_diameter_mm / 2)
    else:
        z += _flat_bump(r_site, TOOTH_AMP, PLATEAU_R, TOOTH_RHO + PLATEAU_R)
    noise_mask = np.clip((r_site - SITE_FLAT_R) / 1.0, 0.0, 1.0)
    z += _noise_field(xx, yy, spec.noise_amplitude_mm, rng) * noise_mask
    return xs, ys, z


def occlusal_frame_z(spec: ArchSpec) -> float:
    """Mirror plane offset: z of the upper slab's reference frame origin."""
    return 2 * spec.gum_height + TOOTH_AMP + spec.occlusal_gap_mm


def site_center(spec: ArchSpec) -> tuple[float, float]:
    slot = slot_of_fdi(spec.missing_fdi, spec.teeth_per_jaw)
    return MARGIN + (slot + 0.5) * TOOTH_PITCH, ARCH_WIDTH / 2


def gen_sample(spec: ArchSpec, mesh_path=None) -> tuple[TriMesh, Sample]:
    """Generate the two-jaw occlusal mesh and its labeled Sample record."""
    jaw = jaw_of_fdi(spec.missing_fdi)
    site_x, site_y = site_center(spec)
    z0 = occlusal_frame_z(spec)

    rng_low = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    rng_up = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    socket_in_top = jaw == "top"
    xs_b, ys_b, z_b = _jaw_surface(spec, site_x, site_y,
                                   has_socket=not socket_in_top, rng=rng_low)
    xs_t, ys_t, z_t = _jaw_surface(spec, site_x, site_y,
                                   has_socket=socket_in_top, rng=rng_up)

    bottom = _slab(xs_b, ys_b, z_b, -BASE_DEPTH)
    top = _slab(xs_t, ys_t, z_t, -BASE_DEPTH)
    # mirror the top slab: z -> z0 - z, flipping winding to stay outward
    top_verts = top.vertices.copy()
    top_verts[:, 2] = z0 - top_verts[:, 2]
    top = TriMesh(top_verts, top.faces[:, ::-1].copy())

    verts = np.vstack([bottom.vertices, top.vertices])
    faces = np.vstack([bottom.faces, top.faces + bottom.n_vertices])
    mesh = TriMesh(verts, faces, name=f"arch_fdi{spec.missing_fdi}")
    sample = Sample(mesh_path=str(mesh_path) if mesh_path else "",
                    jaw=jaw, fdi_index=spec.missing_fdi, labels=spec.labels)
    return mesh, sample


# --- geometric measurement oracle ------------------------------------------

def _surface_z(mesh_pts, mesh_faces, xq, yq, take):
    """z of the surface at vertical line (xq, yq): max or min over all
    triangle intersections."""
    tri = mesh_pts[mesh_faces]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    d1 = (b[:, 0] - a[:, 0]) * (yq - a[:, 1]) - (b[:, 1] - a[:, 1]) * (xq - a[:, 0])
    d2 = (c[:, 0] - b[:, 0]) * (yq - b[:, 1]) - (c[:, 1] - b[:, 1]) * (xq - b[:, 0])
    d3 = (a[:, 0] - c[:, 0]) * (yq - c[:, 1]) - (a[:, 1] - c[:, 1]) * (xq - c[:, 0])
    inside = ((d1 >= -1e-12) & (d2 >= -1e-12) & (d3 >= -1e-12)) | \
             ((d1 <= 1e-12) & (d2 <= 1e-12) & (d3 <= 1e-12))
    if not inside.any():
        raise DatagenError(f"no surface at ({xq:.2f}, {yq:.2f})")
    # barycentric interpolation of z on the intersected triangles
    tri = tri[inside]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    denom = (b[:, 1] - c[:, 1]) * (a[:, 0] - c[:, 0]) + \
            (c[:, 0] - b[:, 0]) * (a[:, 1] - c[:, 1])
    denom = np.where(np.abs(denom) < 1e-15, 1e-15, denom)
    w1 = ((b[:, 1] - c[:, 1]) * (xq - c[:, 0]) + (c[:, 0] - b[:, 0]) * (yq - c[:, 1])) / denom
    w2 = ((c[:, 1] - a[:, 1]) * (xq - c[:, 0]) + (a[:, 0] - c[:, 0]) * (yq - c[:, 1])) / denom
    z = w1 * a[:, 2] + w2 * b[:, 2] + (1 - w1 - w2) * c[:, 2]
    return float(z.max() if take == "max" else z.min())


def measure_labels(mesh: TriMesh, spec: ArchSpec) -> dict:
    """Measure transgingival/diameter/height directly from the generated mesh
    (label-free except for the site location and jaw side)."""
    site_x, site_y = site_center(spec)
    socket_in_top = jaw_of_fdi(spec.missing_fdi) == "top"
    zmid = 0.5 * (mesh.vertices[:, 2].min() + mesh.vertices[:, 2].max())
    centroid_z = mesh.vertices[mesh.faces].mean(axis=1)[:, 2]
    lower_faces = mesh.faces[centroid_z < zmid]
    upper_faces = mesh.faces[centroid_z >= zmid]
    if socket_in_top:
        socket_faces, opp_faces = upper_faces, lower_faces
        take_socket, take_opp, sign = "min", "max", -1.0
    else:
        socket_faces, opp_faces = lower_faces, upper_faces
        take_socket, take_opp, sign = "max", "min", 1.0
    v = mesh.vertices

    def socket_z(xq, yq):
        return sign * _surface_z(v, socket_faces, xq, yq, take_socket)

    floor_z = socket_z(site_x, site_y)
    gum_samples = [socket_z(site_x, site_y + sgn * r)
                   for sgn in (-1, 1) for r in np.arange(5.0, 6.01, 0.25)]
    gum_ref = float(np.mean(gum_samples))
    depth = gum_ref - floor_z

    # diameter: radius of the half-depth level set, averaged over directions
    z_star = gum_ref - depth / 2
    radii = []
    for theta in np.linspace(0, 2 * np.pi, 16, endpoint=False):
        dx, dy = np.cos(theta), np.sin(theta)
        lo, hi = 0.2, 4.5
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if socket_z(site_x + mid * dx, site_y + mid * dy) < z_star:
                lo = mid
            else:
                hi = mid
        radii.append(0.5 * (lo + hi))
    diameter = 2 * float(np.mean(radii))

    # occlusal gap: distance from the gum-level socket mouth to the opposing
    # surface, measured along z
    opp_raw = _surface_z(v, opp_faces, site_x, site_y, take_opp)
    gum_raw = sign * gum_ref
    height = abs(opp_raw - gum_raw)
    return {"transgingival": depth, "diameter": diameter, "height": height}


# --- dataset generation ------------------------------------------------------

DEFAULT_RANGES = {
    "transgingival": (1.0, 4.0),
    "diameter": (3.0, 6.0),
    "height": (4.0, 8.0),
}


def implant_fdi_cycle() -> list[int]:
    return [q * 10 + p for q in (1, 2, 3, 4) for p in IMPLANT_POSITIONS]


def gen_dataset(n: int, seed: int, out_dir, ranges: dict | None = None,
                split_ratio: float = 0.8, noise_amplitude: float = 0.1,
                teeth_per_jaw: int = 14) -> tuple[Manifest, Manifest]:
    """Generate n labeled samples and write meshes plus train/test manifests."""
    if n < 2:
        raise DatagenError(f"need n >= 2 samples, got {n}")
    ranges = {**DEFAULT_RANGES, **(ranges or {})}
    os.makedirs(out_dir, exist_ok=True)
    mesh_dir = os.path.join(out_dir, "meshes")
    os.makedirs(mesh_dir, exist_ok=True)
    fdis = implant_fdi_cycle()
    samples = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        spec = ArchSpec(
            missing_fdi=fdis[i % len(fdis)],
            gingiva_thickness_mm=float(rng.uniform(*ranges["transgingival"])),
            socket_diameter_mm=float(rng.uniform(*ranges["diameter"])),
            occlusal_gap_mm=float(rng.uniform(*ranges["height"])),
            teeth_per_jaw=teeth_per_jaw,
            noise_amplitude_mm=noise_amplitude,
            seed=int(np.random.SeedSequence([seed, i, 7]).generate_state(1)[0]),
        )
        path = os.path.join(mesh_dir, f"sample_{i:05d}.off")
        mesh, sample = gen_sample(spec, mesh_path=path)
        save_mesh(mesh, path)
        samples.append(sample)
    n_train = int(round(n * split_ratio))
    train = Manifest(samples=samples[:n_train], split="train")
    test = Manifest(samples=samples[n_train:], split="test")
    train.save(os.path.join(out_dir, "manifest_train.jsonl"))
    test.save(os.path.join(out_dir, "manifest_test.jsonl"))
    return train, test
