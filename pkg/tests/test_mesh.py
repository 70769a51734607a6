"""Mesh invariants, geometry queries, projection, and IO round-trips."""

import numpy as np
import pytest

from fiberfit.geometry import icosphere, rect_sheet
from fiberfit.mesh import (
    MeshFormatError,
    SurfacePoint,
    TriMesh,
    load_mesh,
    read_vtk,
    save_vtk,
)


def unit_square():
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    return TriMesh(verts, tris)


def test_single_triangle_counts(tmp_path):
    path = tmp_path / "tri.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    mesh = load_mesh(path)
    assert mesh.n_vertices == 3
    assert mesh.n_triangles == 1
    assert len(mesh.edges) == 3


def test_unit_square_counts():
    mesh = unit_square()
    assert mesh.n_vertices == 4
    assert mesh.n_triangles == 2
    assert len(mesh.edges) == 5


def test_out_of_range_index_error(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 8\n")
    with pytest.raises(MeshFormatError, match="vertex"):
        load_mesh(path)


def test_degenerate_triangle_rejected():
    verts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float)
    with pytest.raises(MeshFormatError, match="degenerate"):
        TriMesh(verts, [[0, 1, 2]])


def test_non_manifold_edge_rejected():
    verts = np.array(
        [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [0, -1, 0]], dtype=float
    )
    tris = [[0, 1, 2], [0, 1, 3], [0, 1, 4]]
    with pytest.raises(MeshFormatError, match="manifold"):
        TriMesh(verts, tris)


def test_inconsistent_winding_warns(caplog):
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    tris = np.array([[0, 1, 2], [0, 3, 2]])  # second triangle flipped
    with caplog.at_level("WARNING", logger="fiberfit.mesh"):
        TriMesh(verts, tris)
    assert any("winding" in rec.message for rec in caplog.records)


def test_flat_mesh_vertex_normals():
    mesh = rect_sheet(10, 10, 2)
    normals = mesh.vertex_normals()
    np.testing.assert_allclose(normals, np.tile([0.0, 0.0, 1.0], (mesh.n_vertices, 1)), atol=1e-14)


def test_single_triangle_normals_match_face():
    verts = np.array([[0, 0, 0], [2, 0, 0], [0, 2, 1]], dtype=float)
    mesh = TriMesh(verts, [[0, 1, 2]])
    face = mesh.triangle_normals[0]
    for n in mesh.vertex_normals():
        np.testing.assert_allclose(n, face, atol=1e-14)


def test_icosphere_normals_radial():
    mesh = icosphere(subdivisions=2)
    normals = mesh.vertex_normals()
    radial = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    cosang = np.einsum("ij,ij->i", normals, radial)
    angles = np.degrees(np.arccos(np.clip(cosang, -1, 1)))
    assert angles.max() < 5.0


def test_icosphere_area_converges():
    mesh = icosphere(subdivisions=3)
    assert abs(mesh.areas.sum() - 4 * np.pi) / (4 * np.pi) < 0.03


def test_icosphere_counts():
    # 20 * 4^n faces; V = E - F + 2... for n=2: F=320, V=162
    mesh = icosphere(subdivisions=2)
    assert mesh.n_triangles == 320
    assert mesh.n_vertices == 162
    assert len(mesh.edges) == 480


def test_mean_edge_length_right_triangle():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    mesh = TriMesh(verts, [[0, 1, 2]])
    assert mesh.mean_edge_length() == pytest.approx((1 + 1 + np.sqrt(2)) / 3)


def test_mean_edge_length_grid_enumeration():
    # 2x2-cell grid at spacing 2: horizontal/vertical edges of length 2,
    # diagonals 2*sqrt(2); oracle enumerates unique edges directly.
    mesh = rect_sheet(4, 4, 2)
    lengths = np.linalg.norm(
        mesh.vertices[mesh.edges[:, 0]] - mesh.vertices[mesh.edges[:, 1]], axis=1
    )
    n_diag = int(np.sum(np.isclose(lengths, 2 * np.sqrt(2))))
    n_axis = int(np.sum(np.isclose(lengths, 2.0)))
    assert n_diag == 4 and n_axis == 12 and len(lengths) == 16
    expected = (12 * 2.0 + 4 * 2 * np.sqrt(2)) / 16
    assert mesh.mean_edge_length() == pytest.approx(expected, rel=1e-12)


def test_rect_sheet_layout():
    mesh = rect_sheet(100, 100, 2)
    assert mesh.n_vertices == 51 * 51
    np.testing.assert_array_equal(mesh.vertices[0], [0, 0, 0])
    assert mesh.mean_edge_length() == pytest.approx(
        (2 * 2 * 50 * 51 + 2 * np.sqrt(2) * 2500) / (2 * 50 * 51 + 2500), rel=1e-12
    )


def test_project_vertices_return_zero_distance():
    mesh = icosphere(subdivisions=1, radius=3.0)
    for i in range(0, mesh.n_vertices, 7):
        sp = mesh.project_point(mesh.vertices[i])
        assert isinstance(sp, SurfacePoint)
        np.testing.assert_allclose(sp.position, mesh.vertices[i], atol=1e-12)
        assert np.max(sp.bary) > 1 - 1e-12


def test_project_lifted_centroid():
    verts = np.array([[0, 0, 0], [3, 0, 0], [0, 3, 0]], dtype=float)
    mesh = TriMesh(verts, [[0, 1, 2]])
    centroid = verts.mean(axis=0)
    sp = mesh.project_point(centroid + np.array([0, 0, 1.0]))
    np.testing.assert_allclose(sp.position, centroid, atol=1e-14)
    np.testing.assert_allclose(sp.bary, [1 / 3, 1 / 3, 1 / 3], atol=1e-14)


def test_project_matches_brute_force():
    mesh = icosphere(subdivisions=2, radius=10.0)
    rng = np.random.default_rng(4)
    corners = mesh.vertices[mesh.triangles]

    def brute(p, samples=60):
        best = np.inf
        u = np.linspace(0, 1, samples)
        for a in u:
            for b in np.linspace(0, 1 - a, max(2, int(samples * (1 - a)) + 1)):
                w = np.array([a, b, 1 - a - b])
                pts = np.einsum("c,tcx->tx", w, corners)
                best = min(best, np.min(np.linalg.norm(pts - p, axis=1)))
        return best

    for _ in range(12):
        p = rng.normal(size=3) * rng.uniform(5, 15)
        sp = mesh.project_point(p)
        dist = np.linalg.norm(sp.position - p)
        # closed form must beat every vertex and the dense barycentric scan
        assert dist <= np.min(np.linalg.norm(mesh.vertices - p, axis=1)) + 1e-12
        assert dist <= brute(p) + 1e-6


def test_project_point_off_edge_and_vertex_regions():
    verts = np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0]], dtype=float)
    mesh = TriMesh(verts, [[0, 1, 2]])
    sp = mesh.project_point([3.0, -1.0, 0.5])  # beyond vertex B
    np.testing.assert_allclose(sp.position, [2, 0, 0], atol=1e-14)
    sp = mesh.project_point([1.0, -1.0, 0.0])  # off edge AB
    np.testing.assert_allclose(sp.position, [1, 0, 0], atol=1e-14)
    sp = mesh.project_point([2.0, 2.0, 0.0])  # off hypotenuse
    np.testing.assert_allclose(sp.position, [1, 1, 0], atol=1e-12)


def test_vtk_round_trip_bit_exact(tmp_path):
    mesh = icosphere(subdivisions=1, radius=1.23456789012345678)
    rng = np.random.default_rng(0)
    fields = {
        "phi_ms": rng.uniform(0, 300, mesh.n_vertices),
        "fiber": rng.normal(size=(mesh.n_vertices, 3)),
    }
    path = tmp_path / "out.vtk"
    save_vtk(mesh, path, point_data=fields)
    back, data = read_vtk(path)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    np.testing.assert_array_equal(data["phi_ms"], fields["phi_ms"])
    np.testing.assert_array_equal(data["fiber"], fields["fiber"])


def test_load_mesh_vtk_and_format_inference(tmp_path):
    mesh = unit_square()
    path = tmp_path / "square.vtk"
    save_vtk(mesh, path)
    back = load_mesh(path)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    with pytest.raises(MeshFormatError):
        load_mesh(tmp_path / "square.xyz")


def test_vtk_rejects_non_triangles(tmp_path):
    path = tmp_path / "quad.vtk"
    path.write_text(
        "# vtk DataFile Version 3.0\nquad\nASCII\nDATASET POLYDATA\n"
        "POINTS 4 double\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n"
        "POLYGONS 1 5\n4 0 1 2 3\n"
    )
    with pytest.raises(MeshFormatError, match="non-triangle"):
        read_vtk(path)


def test_obj_malformed_reports_line(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 x\nf 1 2 3\n")
    with pytest.raises(MeshFormatError, match=":3"):
        load_mesh(path)


def test_triangle_basis_orthonormal_in_plane():
    mesh = icosphere(subdivisions=1)
    for t in range(0, mesh.n_triangles, 5):
        B = mesh.triangle_basis(t)
        np.testing.assert_allclose(B.T @ B, np.eye(2), atol=1e-12)
        np.testing.assert_allclose(B.T @ mesh.triangle_normals[t], 0.0, atol=1e-12)
