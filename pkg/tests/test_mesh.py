"""Mesh construction, point location and metric length checks."""

import numpy as np
import pytest

from p2flow.mesh import (
    Mesh2D,
    MetricField,
    SpatialIndex,
    build_rectangle_mesh,
    locate_point,
    metric_edge_length,
    write_vtk,
)


@pytest.fixture
def mesh():
    return build_rectangle_mesh(2.0, 1.0, 6, 3)


class TestBuildRectangleMesh:
    def test_counts(self, mesh):
        assert len(mesh.vertices) == 7 * 4
        assert len(mesh.triangles) == 2 * 6 * 3
        # P2 nodes: vertices plus one midpoint per unique edge
        assert mesh.p2_node_count == len(mesh.vertices) + len(mesh.edges)

    def test_euler_characteristic(self, mesh):
        # disc topology: V - E + F = 1
        assert len(mesh.vertices) - len(mesh.edges) + len(mesh.triangles) == 1

    def test_total_area(self, mesh):
        assert mesh.total_area() == pytest.approx(2.0, rel=1e-14)

    def test_all_triangles_counterclockwise(self, mesh):
        assert np.all(mesh.det_jacobians > 0)

    def test_boundary_nodes_per_side(self, mesh):
        # 2*n + 1 P2 nodes per side (vertices and edge midpoints)
        assert len(mesh.boundary_nodes("bottom")) == 2 * 6 + 1
        assert len(mesh.boundary_nodes("top")) == 2 * 6 + 1
        assert len(mesh.boundary_nodes("left")) == 2 * 3 + 1
        assert len(mesh.boundary_nodes("right")) == 2 * 3 + 1
        ys = mesh.nodes[mesh.boundary_nodes("top"), 1]
        assert np.allclose(ys, 1.0)
        with pytest.raises(ValueError):
            mesh.boundary_nodes("diagonal")

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            build_rectangle_mesh(0.0, 1.0, 2, 2)
        with pytest.raises(ValueError):
            build_rectangle_mesh(1.0, 1.0, 0, 2)


class TestMesh2DValidation:
    def test_clockwise_triangle_rejected(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(ValueError, match="degenerate or clockwise"):
            Mesh2D(pts, np.array([[0, 2, 1]]))

    def test_index_out_of_range_rejected(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(ValueError):
            Mesh2D(pts, np.array([[0, 1, 3]]))

    def test_degenerate_triangle_rejected(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        with pytest.raises(ValueError):
            Mesh2D(pts, np.array([[0, 1, 2]]))

    def test_boundary_must_be_rectangular(self):
        # a boundary edge cut at 45 degrees is not on the bounding box
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.5, 0.5]])
        tris = np.array([[0, 1, 2], [0, 2, 3], [1, 4, 2]])
        with pytest.raises(ValueError, match="bounding rectangle"):
            Mesh2D(pts, tris)


def test_barycentric_round_trip(mesh):
    rng = np.random.default_rng(11)
    tris = rng.integers(0, len(mesh.triangles), size=50)
    bary = rng.dirichlet((1.0, 1.0, 1.0), size=50)
    pts = np.einsum("pk,pkd->pd", bary, mesh.vertices[mesh.triangles[tris]])
    back = mesh.barycentric(tris, pts)
    assert np.allclose(back, bary, atol=1e-12)


def _brute_force_locate(mesh, point, tol=1e-10):
    for t in range(len(mesh.triangles)):
        b = mesh.barycentric(np.array([t]), point[None, :])[0]
        if b.min() >= -tol:
            return t
    return -1


def test_locate_matches_brute_force(mesh):
    rng = np.random.default_rng(12)
    index = SpatialIndex(mesh)
    pts = np.column_stack(
        [rng.uniform(-0.2, 2.2, size=120), rng.uniform(-0.2, 1.2, size=120)]
    )
    tri, bary = index.locate(pts)
    for p, t, b in zip(pts, tri, bary):
        expect = _brute_force_locate(mesh, p)
        assert t == expect, f"point {p}: index found {t}, brute force {expect}"
        if t >= 0:
            assert abs(b.sum() - 1.0) < 1e-12


def test_locate_on_shared_vertex_prefers_lowest_triangle(mesh):
    index = SpatialIndex(mesh)
    v = mesh.vertices[mesh.triangles[5, 0]]
    hit = locate_point(mesh, index, v)
    assert hit is not None
    tri, _ = hit
    assert tri == _brute_force_locate(mesh, v)


def test_locate_point_outside_returns_none(mesh):
    index = SpatialIndex(mesh)
    assert locate_point(mesh, index, np.array([5.0, 5.0])) is None


def test_locate_point_rejects_foreign_index(mesh):
    other = build_rectangle_mesh(2.0, 1.0, 6, 3)
    index = SpatialIndex(other)
    with pytest.raises(ValueError):
        locate_point(mesh, index, np.array([0.5, 0.5]))


class TestMetric:
    def test_identity_metric_gives_euclidean_length(self, mesh):
        metric = MetricField(np.broadcast_to(np.eye(2), (len(mesh.vertices), 2, 2)).copy())
        for e in (0, 3, 7):
            a, b = mesh.edges[e]
            expect = float(np.linalg.norm(mesh.vertices[b] - mesh.vertices[a]))
            assert metric_edge_length(metric, mesh, e) == pytest.approx(expect, rel=1e-12)

    def test_uniform_scaling(self, mesh):
        s = 3.0
        metric = MetricField(
            np.broadcast_to(s**2 * np.eye(2), (len(mesh.vertices), 2, 2)).copy()
        )
        a, b = mesh.edges[0]
        expect = s * float(np.linalg.norm(mesh.vertices[b] - mesh.vertices[a]))
        assert metric_edge_length(metric, mesh, (a, b)) == pytest.approx(expect, rel=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError, match="not symmetric"):
            MetricField(np.array([[[1.0, 0.5], [0.2, 1.0]]]))
        with pytest.raises(ValueError, match="positive definite"):
            MetricField(np.array([[[1.0, 0.0], [0.0, -2.0]]]))
        with pytest.raises(ValueError):
            MetricField(np.eye(2))


def test_write_vtk_round_trip(tmp_path, mesh):
    scalar = mesh.nodes[:, 0] + 2.0 * mesh.nodes[:, 1]
    vec = np.column_stack([mesh.nodes[:, 1], -mesh.nodes[:, 0]])
    path = tmp_path / "fields.vtk"
    write_vtk(path, mesh, point_data={"s": scalar, "v": vec})
    text = path.read_text().splitlines()
    assert text[0].startswith("# vtk DataFile")
    npts = int(next(l for l in text if l.startswith("POINTS")).split()[1])
    assert npts == mesh.p2_node_count
    i = text.index("SCALARS s double 1")
    vals = [float(text[i + 2 + k]) for k in range(npts)]
    assert np.allclose(vals, scalar)
    assert any(l.startswith("VECTORS v double") for l in text)
    # four visualization sub-triangles per element
    ncells = int(next(l for l in text if l.startswith("CELLS")).split()[1])
    assert ncells == 4 * len(mesh.triangles)


def test_write_vtk_rejects_wrong_length(tmp_path, mesh):
    with pytest.raises(ValueError, match="not nodal"):
        write_vtk(tmp_path / "bad.vtk", mesh, point_data={"s": np.zeros(3)})
