"""Conforming triangle meshes on rectangular domains, with P2 node enumeration.

A mesh stores straight-sided triangles over P1 vertices.  Quadratic (P2)
nodes are the vertices followed by one midpoint node per unique edge, so
field arrays of length ``mesh.p2_node_count`` carry equal-order nodal data
for every scalar unknown.  Geometry stays linear: each triangle has a
constant Jacobian and its midpoint nodes sit exactly halfway along the
edges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Mesh2D",
    "MetricField",
    "SpatialIndex",
    "build_rectangle_mesh",
    "locate_point",
    "metric_edge_length",
    "write_vtk",
    "write_metric_vtk",
]

# Accepted barycentric undershoot when deciding point membership.
BARY_TOL = 1e-10

SIDE_NAMES = ("left", "right", "bottom", "top")


class Mesh2D:
    """Immutable triangle mesh with a unique-edge table and boundary tags.

    Parameters
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array, counterclockwise vertex triples

    Boundary edges must lie on the axis-aligned bounding rectangle of the
    vertex set; each one is tagged left/right/bottom/top.  Mutating a mesh
    after construction is not supported; derived tables assume the arrays
    never change (the ``version`` attribute lets callers assert that).
    """

    def __init__(self, vertices: np.ndarray, triangles: np.ndarray):
        vertices = np.ascontiguousarray(vertices, dtype=float)
        triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise ValueError("vertices must be an (nv, 2) array")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise ValueError("triangles must be an (nt, 3) array")
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise ValueError("triangle vertex index out of range")

        self.vertices = vertices
        self.triangles = triangles
        self.version = 0

        p = vertices[triangles]
        # Column-wise edge vectors of the affine map from the reference triangle.
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        if np.any(det <= 0.0):
            bad = int(np.argmax(det <= 0.0))
            raise ValueError(f"triangle {bad} is degenerate or clockwise")
        self.jacobians = jac
        self.det_jacobians = det
        self.areas = 0.5 * det
        inv = np.empty_like(jac)
        inv[:, 0, 0] = jac[:, 1, 1]
        inv[:, 0, 1] = -jac[:, 0, 1]
        inv[:, 1, 0] = -jac[:, 1, 0]
        inv[:, 1, 1] = jac[:, 0, 0]
        self.inv_jacobians = inv / det[:, None, None]

        self._build_edges()
        self._tag_boundary()
        self._cache: dict = {}

    # -- derived tables -------------------------------------------------

    def _build_edges(self):
        t = self.triangles
        raw = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1)
        raw = raw.reshape(-1, 2)
        lo = raw.min(axis=1)
        hi = raw.max(axis=1)
        keys = np.stack([lo, hi], axis=1)
        self.edges, inverse, counts = np.unique(
            keys, axis=0, return_inverse=True, return_counts=True
        )
        if counts.size and counts.max() > 2:
            raise ValueError("non-manifold edge: more than two incident triangles")
        self.tri_edges = inverse.reshape(-1, 3)
        self.edge_tri_count = counts
        self.boundary_edge_ids = np.nonzero(counts == 1)[0]

        nv = len(self.vertices)
        self.p2_node_count = nv + len(self.edges)
        mid = 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])
        self.nodes = np.vstack([self.vertices, mid])
        # Local P2 order: three vertices, then midpoints of edges 01, 12, 20.
        self.p2_conn = np.hstack([self.triangles, nv + self.tri_edges])

    def _tag_boundary(self):
        v = self.vertices
        self.bounds = (v[:, 0].min(), v[:, 0].max(), v[:, 1].min(), v[:, 1].max())
        xmin, xmax, ymin, ymax = self.bounds
        diam = float(np.hypot(xmax - xmin, ymax - ymin))
        tol = 1e-9 * max(diam, 1.0)

        self.boundary_tags: dict[int, str] = {}
        for e in self.boundary_edge_ids:
            a, b = self.edges[e]
            mx, my = 0.5 * (v[a] + v[b])
            if abs(mx - xmin) <= tol:
                side = "left"
            elif abs(mx - xmax) <= tol:
                side = "right"
            elif abs(my - ymin) <= tol:
                side = "bottom"
            elif abs(my - ymax) <= tol:
                side = "top"
            else:
                raise ValueError(
                    f"boundary edge {int(e)} does not lie on the bounding rectangle"
                )
            self.boundary_tags[int(e)] = side

    # -- queries ----------------------------------------------------------

    def boundary_nodes(self, side: str) -> np.ndarray:
        """P2 node ids (vertices and midpoints) on one side of the rectangle."""
        if side not in SIDE_NAMES:
            raise ValueError(f"unknown side {side!r}")
        nv = len(self.vertices)
        ids: set[int] = set()
        for e, tag in self.boundary_tags.items():
            if tag == side:
                a, b = self.edges[e]
                ids.update((int(a), int(b), nv + e))
        return np.array(sorted(ids), dtype=np.int64)

    def barycentric(self, tri_ids: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Barycentric coordinates of ``points`` w.r.t. the given triangles."""
        tri_ids = np.asarray(tri_ids, dtype=np.int64)
        points = np.asarray(points, dtype=float)
        origin = self.vertices[self.triangles[tri_ids, 0]]
        d = points - origin
        inv = self.inv_jacobians[tri_ids]
        uv = np.einsum("...ij,...j->...i", inv, d)
        lam0 = 1.0 - uv[..., 0] - uv[..., 1]
        return np.stack([lam0, uv[..., 0], uv[..., 1]], axis=-1)

    def total_area(self) -> float:
        return float(self.areas.sum())


def build_rectangle_mesh(width: float, height: float, nx: int, ny: int) -> Mesh2D:
    """Structured triangulation of [0, width] x [0, height].

    Each of the nx*ny grid cells is split along a diagonal; the diagonal
    direction alternates in a checkerboard so no vertex collects a skewed
    valence pattern.  Returns a mesh with 2*nx*ny triangles.
    """
    if width <= 0 or height <= 0:
        raise ValueError("width and height must be positive")
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be at least 1")

    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    xg, yg = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.stack([xg.ravel(), yg.ravel()], axis=1)

    def vid(i, j):
        return i * (ny + 1) + j

    tris = np.empty((2 * nx * ny, 3), dtype=np.int64)
    k = 0
    for i in range(nx):
        for j in range(ny):
            v00 = vid(i, j)
            v10 = vid(i + 1, j)
            v01 = vid(i, j + 1)
            v11 = vid(i + 1, j + 1)
            if (i + j) % 2 == 0:
                tris[k] = (v00, v10, v11)
                tris[k + 1] = (v00, v11, v01)
            else:
                tris[k] = (v00, v10, v01)
                tris[k + 1] = (v10, v11, v01)
            k += 2
    return Mesh2D(vertices, tris)


@dataclass
class MetricField:
    """One symmetric positive definite 2x2 tensor per mesh vertex."""

    tensors: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tensors, dtype=float)
        if t.ndim != 3 or t.shape[1:] != (2, 2):
            raise ValueError("tensors must have shape (nv, 2, 2)")
        sym_err = np.abs(t[:, 0, 1] - t[:, 1, 0])
        scale = np.abs(t).max(axis=(1, 2)) + 1e-300
        if np.any(sym_err > 1e-12 * scale):
            raise ValueError("metric tensor is not symmetric")
        eig = np.linalg.eigvalsh(0.5 * (t + np.transpose(t, (0, 2, 1))))
        if np.any(eig[:, 0] <= 1e-12 * np.abs(eig[:, 1])):
            raise ValueError("metric tensor is not positive definite")
        self.tensors = t


def metric_edge_length(metric: MetricField, mesh: Mesh2D, edge) -> float:
    """Length of a mesh edge measured in the metric.

    ``edge`` is either an edge id or a pair of vertex ids.  The distorted
    length integral along the edge is approximated by the geometric mean
    of the two endpoint evaluations sqrt(e^T M e).
    """
    if np.isscalar(edge):
        a, b = mesh.edges[int(edge)]
    else:
        a, b = int(edge[0]), int(edge[1])
    e = mesh.vertices[b] - mesh.vertices[a]
    la = float(e @ metric.tensors[a] @ e)
    lb = float(e @ metric.tensors[b] @ e)
    if la <= 0.0 or lb <= 0.0:
        raise ValueError("metric is not positive along the edge")
    return float((la * lb) ** 0.25)


class SpatialIndex:
    """Uniform-grid point location index over a mesh.

    Cells hold candidate triangle ids (roughly two per cell on average);
    point queries test candidates in ascending triangle id, so ties on
    shared edges and vertices resolve to the lowest id.
    """

    def __init__(self, mesh: Mesh2D, target_per_cell: float = 2.0):
        self.mesh = mesh
        self.mesh_version = mesh.version
        xmin, xmax, ymin, ymax = mesh.bounds
        w = max(xmax - xmin, 1e-300)
        h = max(ymax - ymin, 1e-300)
        ncells = max(1, int(len(mesh.triangles) / target_per_cell))
        self.ncx = max(1, int(round(np.sqrt(ncells * w / h))))
        self.ncy = max(1, int(np.ceil(ncells / self.ncx)))
        self.x0, self.y0 = xmin, ymin
        self.dx = w / self.ncx
        self.dy = h / self.ncy

        p = mesh.vertices[mesh.triangles]
        ix0 = np.clip(((p[..., 0].min(axis=1) - xmin) / self.dx).astype(int), 0, self.ncx - 1)
        ix1 = np.clip(((p[..., 0].max(axis=1) - xmin) / self.dx).astype(int), 0, self.ncx - 1)
        iy0 = np.clip(((p[..., 1].min(axis=1) - ymin) / self.dy).astype(int), 0, self.ncy - 1)
        iy1 = np.clip(((p[..., 1].max(axis=1) - ymin) / self.dy).astype(int), 0, self.ncy - 1)

        spans = (ix1 - ix0 + 1) * (iy1 - iy0 + 1)
        total = int(spans.sum())
        cell_ids = np.empty(total, dtype=np.int64)
        tri_ids = np.empty(total, dtype=np.int64)
        pos = 0
        for t in range(len(mesh.triangles)):
            for ix in range(ix0[t], ix1[t] + 1):
                base = ix * self.ncy
                n = iy1[t] - iy0[t] + 1
                cell_ids[pos : pos + n] = base + np.arange(iy0[t], iy1[t] + 1)
                tri_ids[pos : pos + n] = t
                pos += n
        order = np.lexsort((tri_ids, cell_ids))
        cell_ids = cell_ids[order]
        tri_ids = tri_ids[order]
        ncell_total = self.ncx * self.ncy
        counts = np.bincount(cell_ids, minlength=ncell_total)
        self.cell_start = np.concatenate([[0], np.cumsum(counts)])
        self.cell_tris = tri_ids

    def _check_fresh(self):
        if self.mesh.version != self.mesh_version:
            raise RuntimeError("spatial index is stale: mesh version changed")

    def _cells_of(self, points: np.ndarray) -> np.ndarray:
        ix = np.clip(((points[:, 0] - self.x0) / self.dx).astype(int), 0, self.ncx - 1)
        iy = np.clip(((points[:, 1] - self.y0) / self.dy).astype(int), 0, self.ncy - 1)
        return ix * self.ncy + iy

    def locate(self, points: np.ndarray, tol: float = BARY_TOL):
        """Vectorized point location.

        Returns ``(tri_ids, bary)`` with tri_ids == -1 for points not inside
        any triangle (barycentric undershoot beyond ``tol``).
        """
        self._check_fresh()
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = len(points)
        cells = self._cells_of(points)
        start = self.cell_start[cells]
        stop = self.cell_start[cells + 1]
        counts = stop - start
        total = int(counts.sum())

        out_tri = np.full(n, -1, dtype=np.int64)
        out_bary = np.full((n, 3), np.nan)
        if total == 0:
            return out_tri, out_bary

        pt_idx = np.repeat(np.arange(n), counts)
        offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        cand = self.cell_tris[np.repeat(start, counts) + offs]

        bary = self.mesh.barycentric(cand, points[pt_idx])
        ok = bary.min(axis=1) >= -tol
        # Lowest triangle id wins: candidates are stored ascending per cell
        # and pt_idx is sorted, so the first acceptable entry per point is
        # the answer.
        ok_pts = pt_idx[ok]
        first_pos = np.unique(ok_pts, return_index=True)[1]
        hit = np.nonzero(ok)[0][first_pos]
        out_tri[pt_idx[hit]] = cand[hit]
        out_bary[pt_idx[hit]] = bary[hit]
        return out_tri, out_bary


def locate_point(mesh: Mesh2D, index: SpatialIndex, point, tol: float = BARY_TOL):
    """Locate one point; returns (triangle id, barycentric) or None."""
    if index.mesh is not mesh:
        raise ValueError("index was built for a different mesh")
    tri, bary = index.locate(np.asarray(point, dtype=float)[None, :], tol=tol)
    if tri[0] < 0:
        return None
    return int(tri[0]), bary[0]


# -- legacy VTK output ----------------------------------------------------


def _subdivided(mesh: Mesh2D):
    """Once-subdivided visualization triangles whose corners are P2 nodes."""
    c = mesh.p2_conn
    sub = np.concatenate(
        [
            c[:, [0, 3, 5]],
            c[:, [1, 4, 3]],
            c[:, [2, 5, 4]],
            c[:, [3, 4, 5]],
        ],
        axis=0,
    )
    return sub


def write_vtk(path, mesh: Mesh2D, point_data: dict | None = None):
    """Write mesh and nodal fields as legacy ASCII VTK.

    P2 fields are emitted as point data on the once-subdivided triangle
    mesh so midpoint values are preserved without interpolation loss.
    """
    sub = _subdivided(mesh)
    pts = mesh.nodes
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write("p2flow fields\n")
        f.write("ASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {len(pts)} double\n")
        for x, y in pts:
            f.write(f"{x:.17g} {y:.17g} 0\n")
        f.write(f"CELLS {len(sub)} {4 * len(sub)}\n")
        for a, b, c in sub:
            f.write(f"3 {a} {b} {c}\n")
        f.write(f"CELL_TYPES {len(sub)}\n")
        f.write("5\n" * len(sub))
        if point_data:
            f.write(f"POINT_DATA {len(pts)}\n")
            for name, arr in point_data.items():
                arr = np.asarray(arr, dtype=float)
                if arr.shape[0] != len(pts):
                    raise ValueError(f"field {name!r} is not nodal on this mesh")
                if arr.ndim == 1:
                    f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                    for v in arr:
                        f.write(f"{v:.17g}\n")
                elif arr.ndim == 2 and arr.shape[1] == 2:
                    f.write(f"VECTORS {name} double\n")
                    for vx, vy in arr:
                        f.write(f"{vx:.17g} {vy:.17g} 0\n")
                else:
                    raise ValueError(f"field {name!r} must be scalar or 2-vector")


def write_metric_vtk(path, mesh: Mesh2D, metric: MetricField):
    """Write per-vertex metric ellipse axes (eigenvector * implied size)."""
    w, v = np.linalg.eigh(metric.tensors)
    sizes = 1.0 / np.sqrt(w)
    major = v[:, :, 0] * sizes[:, 0, None]
    minor = v[:, :, 1] * sizes[:, 1, None]
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write("p2flow metric\n")
        f.write("ASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {len(mesh.vertices)} double\n")
        for x, y in mesh.vertices:
            f.write(f"{x:.17g} {y:.17g} 0\n")
        f.write(f"CELLS {len(mesh.triangles)} {4 * len(mesh.triangles)}\n")
        for a, b, c in mesh.triangles:
            f.write(f"3 {a} {b} {c}\n")
        f.write(f"CELL_TYPES {len(mesh.triangles)}\n")
        f.write("5\n" * len(mesh.triangles))
        f.write(f"POINT_DATA {len(mesh.vertices)}\n")
        for name, arr in (("metric_major", major), ("metric_minor", minor)):
            f.write(f"VECTORS {name} double\n")
            for vx, vy in arr:
                f.write(f"{vx:.17g} {vy:.17g} 0\n")
