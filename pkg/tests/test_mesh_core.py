"""mesh_core: I/O round trips, validation, face geometry, vertex normals."""

import numpy as np
import pytest

from abutmesh.mesh_core import (MeshError, MeshInvariantError, MeshParseError,
                                TriMesh, face_geometry, load_mesh, save_mesh,
                                validate, vertex_normals)
from conftest import make_icosphere, random_rotation

TRIANGLE = TriMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]),
                   np.array([[0, 1, 2]]))


class TestIO:
    def test_off_tetrahedron_round_trip(self, tetrahedron, tmp_path):
        path = tmp_path / "tet.off"
        save_mesh(tetrahedron, path)
        again = load_mesh(path)
        assert again.n_vertices == 4
        assert again.n_faces == 4
        assert np.array_equal(again.faces, tetrahedron.faces)
        assert np.allclose(again.vertices, tetrahedron.vertices, atol=1e-6)

    def test_obj_round_trip(self, tetrahedron, tmp_path):
        path = tmp_path / "tet.obj"
        save_mesh(tetrahedron, path)
        again = load_mesh(path)
        assert np.array_equal(again.faces, tetrahedron.faces)
        assert np.allclose(again.vertices, tetrahedron.vertices, atol=1e-6)

    def test_obj_quad_fan_triangulated(self, tmp_path):
        path = tmp_path / "quad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        mesh = load_mesh(path)
        # fan from the first vertex: (0,1,2) and (0,2,3)
        assert np.array_equal(mesh.faces, [[0, 1, 2], [0, 2, 3]])

    def test_off_dangling_index(self, tmp_path):
        path = tmp_path / "bad.off"
        path.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 99\n")
        with pytest.raises(MeshInvariantError, match="face 0"):
            load_mesh(path)

    def test_off_non_triangle_face_rejected(self, tmp_path):
        path = tmp_path / "quad.off"
        path.write_text("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
        with pytest.raises(MeshParseError, match="non-triangle"):
            load_mesh(path)

    def test_parse_error_carries_line_number(self, tmp_path):
        path = tmp_path / "bad.off"
        path.write_text("OFF\n1 0 0\nnot a vertex\n")
        with pytest.raises(MeshParseError, match=r":3:"):
            load_mesh(path)

    def test_unwritable_path(self, tetrahedron):
        with pytest.raises(MeshError, match="cannot write"):
            save_mesh(tetrahedron, "/no/such/dir/mesh.off")

    def test_missing_file(self):
        with pytest.raises(MeshError, match="no such file"):
            load_mesh("/nonexistent.off")

    def test_large_mesh_round_trip(self, tmp_path):
        mesh = make_icosphere(3)  # 1280 faces
        path = tmp_path / "sphere.off"
        save_mesh(mesh, path)
        assert path.stat().st_size > 0
        again = load_mesh(path)
        assert np.array_equal(again.faces, mesh.faces)
        assert np.allclose(again.vertices, mesh.vertices, atol=1e-6)

    def test_unsupported_extension(self, tetrahedron, tmp_path):
        with pytest.raises(MeshError, match="extension"):
            save_mesh(tetrahedron, tmp_path / "mesh.stl")


class TestValidate:
    def test_closed_tetrahedron(self, tetrahedron):
        rep = validate(tetrahedron)
        assert rep.is_watertight and rep.is_manifold
        assert rep.boundary_edge_count == 0
        assert rep.euler_characteristic == 2

    def test_single_triangle(self):
        rep = validate(TRIANGLE)
        assert not rep.is_watertight
        assert rep.boundary_edge_count == 3

    def test_cube_euler(self, cube):
        rep = validate(cube)
        assert rep.is_watertight
        # brute-force edge enumeration: 12 triangles * 3 halves / 2 = 18 edges
        edges = set()
        for f in cube.faces:
            for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                edges.add((min(a, b), max(a, b)))
        assert len(edges) == 18
        assert rep.euler_characteristic == 8 - 18 + 12 == 2

    def test_validate_is_pure(self, icosphere):
        assert validate(icosphere) == validate(icosphere)

    def test_face_with_repeated_vertex(self):
        mesh = TriMesh(np.eye(3), np.array([[0, 1, 1]]))
        with pytest.raises(MeshInvariantError, match="same vertex twice"):
            validate(mesh)


class TestFaceGeometry:
    def test_right_triangle_analytic(self):
        geo = face_geometry(TRIANGLE)
        assert np.isclose(geo.area[0], 0.5)
        assert np.allclose(geo.unit_normal[0], [0, 0, 1])
        assert np.allclose(geo.center[0], [1 / 3, 1 / 3, 0])
        assert np.allclose(geo.interior_angles[0],
                           [np.pi / 2, np.pi / 4, np.pi / 4])

    def test_rotated_triangle(self):
        # 90 degrees about x: (x, y, z) -> (x, -z, y)
        R = np.array([[1.0, 0, 0], [0, 0, -1], [0, 1, 0]])
        rotated = TriMesh(TRIANGLE.vertices @ R.T, TRIANGLE.faces)
        geo = face_geometry(rotated)
        assert np.isclose(geo.area[0], 0.5)
        assert np.allclose(geo.interior_angles[0],
                           [np.pi / 2, np.pi / 4, np.pi / 4])
        assert np.allclose(geo.unit_normal[0], [0, -1, 0])

    def test_equilateral(self):
        mesh = TriMesh(np.array([[0.0, 0, 0], [2, 0, 0], [1, np.sqrt(3), 0]]),
                       np.array([[0, 1, 2]]))
        geo = face_geometry(mesh)
        assert np.isclose(geo.area[0], np.sqrt(3))
        assert np.allclose(geo.interior_angles[0], np.pi / 3)

    def test_degenerate_face_flagged(self):
        mesh = TriMesh(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]]),
                       np.array([[0, 1, 2]]))
        geo = face_geometry(mesh)
        assert not geo.valid[0]
        assert np.allclose(geo.unit_normal[0], 0)

    def test_angle_sums_random_triangles(self):
        rng = np.random.default_rng(0)
        verts = rng.standard_normal((3000, 3))
        faces = np.arange(3000).reshape(1000, 3)
        geo = face_geometry(TriMesh(verts, faces))
        sums = geo.interior_angles[geo.valid].sum(axis=1)
        assert np.abs(sums - np.pi).max() < 1e-6

    def test_rigid_motion_invariance(self, icosphere):
        rng = np.random.default_rng(1)
        geo = face_geometry(icosphere)
        for _ in range(5):
            R = random_rotation(rng)
            t = rng.standard_normal(3)
            moved = TriMesh(icosphere.vertices @ R.T + t, icosphere.faces)
            g2 = face_geometry(moved)
            assert np.allclose(g2.area, geo.area, atol=1e-9)
            assert np.allclose(g2.interior_angles, geo.interior_angles, atol=1e-9)
            assert np.allclose(g2.unit_normal, geo.unit_normal @ R.T, atol=1e-9)
            assert np.allclose(g2.center, geo.center @ R.T + t, atol=1e-9)


class TestVertexNormals:
    def test_flat_triangle(self):
        vn = vertex_normals(TRIANGLE)
        assert np.allclose(vn, [[0, 0, 1]] * 3)

    def test_icosphere_near_radial(self, icosphere):
        vn = vertex_normals(icosphere)
        radial = icosphere.vertices / np.linalg.norm(
            icosphere.vertices, axis=1, keepdims=True)
        cos = np.einsum("ij,ij->i", vn, radial)
        assert np.degrees(np.arccos(np.clip(cos, -1, 1))).max() < 5.0

    def test_coplanar_pair_shared_edge(self):
        mesh = TriMesh(
            np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]),
            np.array([[0, 1, 2], [1, 3, 2]]))
        vn = vertex_normals(mesh)
        assert np.allclose(vn[1], [0, 0, 1])
        assert np.allclose(vn[2], [0, 0, 1])

    def test_isolated_vertex_zero(self):
        mesh = TriMesh(np.vstack([TRIANGLE.vertices, [[9, 9, 9]]]),
                       TRIANGLE.faces)
        vn = vertex_normals(mesh)
        assert np.allclose(vn[3], 0)
