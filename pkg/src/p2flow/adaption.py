"""Anisotropic mesh adaption driven by interface sensors.

The pipeline per adaption step:

1. ``build_sensor``: two regularized Heaviside fields, one of the current
   level set and one of its linear extrapolation in time, so the metric
   covers both where the interface is and where it is about to be.
2. ``spr_fit``: superconvergent patch recovery of derivatives up to
   fourth order by a least-squares quartic fit over the P2 nodes of the
   elements around a vertex.
3. ``bound_matrix_Q``: a single positive definite bound tensor per
   vertex, the matrix geometric mean of the (floored) Hessians of every
   first-derivative component of every sensor.
4. ``metric_M``: the optimal-complexity scaling of Q with prescribed
   P1-node budget N, then eigenvalue clamping to the size limits.
5. ``adapt_mesh``: greedy local remeshing (edge split, edge collapse,
   edge swap, vertex smoothing) until all operations stop improving the
   worst local element quality measured in the metric.
6. ``transfer_fields``: P2 interpolation of nodal fields onto the new
   mesh through point location in the old one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import fem
from .levelset import heaviside_eps
from .mesh import Mesh2D, MetricField, SpatialIndex

__all__ = [
    "SensorField",
    "RecoveredDerivatives",
    "build_sensor",
    "spr_fit",
    "bound_matrix_Q",
    "metric_M",
    "metric_from_sensor",
    "adapt_mesh",
    "transfer_fields",
    "transfer_state",
    "lumped_vertex_areas",
    "metric_complexity",
    "bound_violation_stats",
]

# Edge-length thresholds (in the metric) that trigger refinement and
# coarsening candidates; the quality gate makes the final call.
SPLIT_LEN = 1.4
COLLAPSE_LEN = 1.0 / 1.4


@dataclass
class SensorField:
    """Nodal sensor components, shape (p2_node_count, k)."""

    values: np.ndarray


def build_sensor(phi: np.ndarray, phi_prev: np.ndarray, mesh: Mesh2D, eps: float) -> SensorField:
    """Interface sensor: H_eps of the level set now and extrapolated one step."""
    phi = np.asarray(phi, dtype=float)
    phi_prev = np.asarray(phi_prev, dtype=float)
    if phi.shape != (mesh.p2_node_count,) or phi_prev.shape != phi.shape:
        raise ValueError("sensor inputs must be nodal P2 fields")
    s = np.stack(
        [heaviside_eps(phi, eps), heaviside_eps(2.0 * phi - phi_prev, eps)], axis=1
    )
    return SensorField(s)


# -- superconvergent patch recovery ----------------------------------------

_QUARTIC_POWERS = [(a, b) for tot in range(5) for a in range(tot, -1, -1) for b in [tot - a]]
_CUBIC_COUNT = 10  # monomials of degree <= 3


@dataclass
class RecoveredDerivatives:
    """Derivatives of a nodal field at one vertex, recovered by patch fitting.

    ``third`` is ordered (xxx, xxy, xyy, yyy), ``fourth``
    (xxxx, xxxy, xxyy, xyyy, yyyy).
    """

    gradient: np.ndarray
    hessian: np.ndarray
    third: np.ndarray
    fourth: np.ndarray


def _vertex_tri_adjacency(mesh: Mesh2D):
    adj = mesh._cache.get("vertex_tris")
    if adj is None:
        adj = [[] for _ in range(len(mesh.vertices))]
        for t, tri in enumerate(mesh.triangles):
            for v in tri:
                adj[v].append(t)
        mesh._cache["vertex_tris"] = adj
    return adj

def _patch_nodes(mesh: Mesh2D, vertex: int, min_nodes: int):
    """P2 nodes of the elements within enough rings of a vertex."""
    adj = _vertex_tri_adjacency(mesh)
    tris = set(adj[vertex])
    verts = {vertex}
    for _ in range(8):
        nodes = set()
        for t in tris:
            nodes.update(mesh.p2_conn[t].tolist())
        if len(nodes) >= min_nodes:
            return sorted(nodes), tris
        verts = set()
        for t in tris:
            verts.update(mesh.triangles[t].tolist())
        grown = set(tris)
        for v in verts:
            grown.update(adj[v])
        if grown == tris:  # mesh exhausted
            return sorted(nodes), tris
        tris = grown
    nodes = set()
    for t in tris:
        nodes.update(mesh.p2_conn[t].tolist())
    return sorted(nodes), tris


_FACT = [1.0, 1.0, 2.0, 6.0, 24.0]


def _fit_patch(coords: np.ndarray, rhs: np.ndarray, degree: int):
    """Least-squares polynomial fit in centered, scaled coordinates.

    Returns (coefficients, rank, scale).  ``rhs`` may have several
    columns, one fit per column.
    """
    r = float(np.abs(coords).max())
    r = r if r > 0 else 1.0
    x = coords[:, 0] / r
    y = coords[:, 1] / r
    powers = [(a, b) for (a, b) in _QUARTIC_POWERS if a + b <= degree]
    A = np.stack([x**a * y**b for a, b in powers], axis=1)
    coef, _, rank, _ = np.linalg.lstsq(A, rhs, rcond=None)
    return coef, rank, r, powers


def _derivs_from_coeffs(coef: np.ndarray, powers, r: float):
    """All derivatives at the patch center from fit coefficients."""
    lookup = {p: coef[i] for i, p in enumerate(powers)}
    zero = np.zeros_like(coef[0])

    def d(a, b):
        c = lookup.get((a, b))
        if c is None:
            c = zero
        return c * _FACT[a] * _FACT[b] / r ** (a + b)

    grad = np.stack([d(1, 0), d(0, 1)])
    hess = np.stack([d(2, 0), d(1, 1), d(0, 2)])
    third = np.stack([d(3, 0), d(2, 1), d(1, 2), d(0, 3)])
    fourth = np.stack([d(4, 0), d(3, 1), d(2, 2), d(1, 3), d(0, 4)])
    return grad, hess, third, fourth


def _spr_vertex(values2d: np.ndarray, mesh: Mesh2D, vertex: int):
    """Quartic patch fit at one vertex; falls back to cubic if rank deficient."""
    min_nodes = 30
    for attempt in range(4):
        nodes, _ = _patch_nodes(mesh, vertex, min_nodes)
        coords = mesh.nodes[nodes] - mesh.vertices[vertex]
        rhs = values2d[nodes]
        coef, rank, r, powers = _fit_patch(coords, rhs, 4)
        if rank == len(powers):
            return _derivs_from_coeffs(coef, powers, r)
        min_nodes = 2 * min_nodes
        if len(nodes) < min_nodes and attempt >= 1:
            break
    coef, rank, r, powers = _fit_patch(coords, rhs, 3)
    return _derivs_from_coeffs(coef, powers, r)


def spr_fit(values: np.ndarray, mesh: Mesh2D, vertex: int) -> RecoveredDerivatives:
    """Recover derivatives of a nodal P2 field at a vertex.

    Fits a quartic polynomial over the P2 nodes of the surrounding
    elements (rings grown until at least 30 nodes) and reads derivatives
    off the fit; exact for global quartics.  A rank-deficient patch is
    grown and, as a last resort, refitted at cubic order with zero
    fourth derivatives.
    """
    values = np.asarray(values, dtype=float).reshape(-1, 1)
    if len(values) != mesh.p2_node_count:
        raise ValueError("field is not nodal on this mesh")
    grad, hess, third, fourth = _spr_vertex(values, mesh, int(vertex))
    return RecoveredDerivatives(
        gradient=grad[:, 0],
        hessian=np.array(
            [[hess[0, 0], hess[1, 0]], [hess[1, 0], hess[2, 0]]]
        ),
        third=third[:, 0],
        fourth=fourth[:, 0],
    )


def _third_derivatives_all(sensor: np.ndarray, mesh: Mesh2D) -> np.ndarray:
    """Third derivatives of every sensor component at every vertex, (nv, k, 4)."""
    nv = len(mesh.vertices)
    k = sensor.shape[1]
    out = np.empty((nv, k, 4))
    for v in range(nv):
        _, _, third, _ = _spr_vertex(sensor, mesh, v)
        out[v] = third.T
    return out


# -- bound tensor and metric -------------------------------------------------


def _spd_floor(mats: np.ndarray, lam_floor: float) -> np.ndarray:
    """Symmetrize and floor eigenvalues at lam_floor in absolute value."""
    s = 0.5 * (mats + np.swapaxes(mats, -1, -2))
    w, vecs = np.linalg.eigh(s)
    w = np.maximum(np.abs(w), lam_floor)
    return np.einsum("...ij,...j,...kj->...ik", vecs, w, vecs)


def bound_matrix_Q(mats: np.ndarray, lam_floor: float) -> np.ndarray:
    """Geometric mean of SPD-floored tensors over the next-to-last axis.

    ``mats`` has shape (..., k, 2, 2): the k Hessians of the first
    derivative components of all sensors.  Each input is symmetrized,
    its eigenvalues replaced by max(|lambda|, lam_floor), and the result
    is exp(mean(log(.))), a symmetric positive definite bound that
    commutes with uniform scaling of the inputs.
    """
    mats = np.asarray(mats, dtype=float)
    if mats.shape[-2:] != (2, 2):
        raise ValueError("expected trailing 2x2 matrices")
    if lam_floor <= 0.0:
        raise ValueError("lam_floor must be positive")
    spd = _spd_floor(mats, lam_floor)
    w, vecs = np.linalg.eigh(spd)
    logs = np.einsum("...ij,...j,...kj->...ik", vecs, np.log(w), vecs)
    mean_log = logs.mean(axis=-3)
    w2, v2 = np.linalg.eigh(mean_log)
    return np.einsum("...ij,...j,...kj->...ik", v2, np.exp(w2), v2)


def lumped_vertex_areas(mesh: Mesh2D) -> np.ndarray:
    """One third of the incident triangle areas per vertex."""
    w = np.zeros(len(mesh.vertices))
    np.add.at(w, mesh.triangles.ravel(), np.repeat(mesh.areas / 3.0, 3))
    return w


def metric_complexity(metric: MetricField, mesh: Mesh2D) -> float:
    """Integral of sqrt(det M) with mass-lumped vertex weights."""
    det = np.linalg.det(metric.tensors)
    return float((lumped_vertex_areas(mesh) * np.sqrt(det)).sum())


def metric_M(
    q_field: np.ndarray,
    mesh: Mesh2D,
    n_target: float,
    h_min: float | None = None,
    h_max: float | None = None,
) -> MetricField:
    """Complexity-normalized anisotropic metric from per-vertex bound tensors.

    M = N * (integral of det(Q)^(3/8))^(-1) * det(Q)^(-1/8) * Q, which
    makes the lumped integral of sqrt(det M) equal N exactly; afterwards
    the eigenvalues are clamped so implied sizes stay in [h_min, h_max].
    Pass h_min=None / h_max=None to skip clamping.
    """
    if n_target < 10:
        raise ValueError("n_target must be at least 10")
    q_field = np.asarray(q_field, dtype=float)
    det = np.linalg.det(q_field)
    if np.any(det <= 0.0):
        raise ValueError("bound tensors must be positive definite")
    weights = lumped_vertex_areas(mesh)
    integral = float((weights * det**0.375).sum())
    m = (n_target / integral) * det[:, None, None] ** -0.125 * q_field
    if h_min is not None or h_max is not None:
        lo = 0.0 if h_max is None else 1.0 / h_max**2
        hi = np.inf if h_min is None else 1.0 / h_min**2
        w, vecs = np.linalg.eigh(m)
        w = np.clip(w, lo, hi)
        m = np.einsum("...ij,...j,...kj->...ik", vecs, w, vecs)
    return MetricField(m)


def default_size_limits(mesh: Mesh2D):
    """Default clamp sizes: h_min = diameter * 1e-4, h_max = diameter / 4."""
    xmin, xmax, ymin, ymax = mesh.bounds
    diam = math.hypot(xmax - xmin, ymax - ymin)
    return diam * 1e-4, diam / 4.0


def metric_from_sensor(
    sensor: SensorField,
    mesh: Mesh2D,
    n_target: float,
    h_min: float | None = None,
    h_max: float | None = None,
) -> MetricField:
    """Full metric pipeline: SPR third derivatives -> Q -> normalized M."""
    if h_min is None and h_max is None:
        h_min, h_max = default_size_limits(mesh)
    third = _third_derivatives_all(sensor.values, mesh)  # (nv, k, 4)
    # Hessians of d s/dx and d s/dy from third derivatives, per component.
    xxx, xxy, xyy, yyy = (third[..., i] for i in range(4))
    hx = np.stack(
        [np.stack([xxx, xxy], -1), np.stack([xxy, xyy], -1)], -2
    )
    hy = np.stack(
        [np.stack([xxy, xyy], -1), np.stack([xyy, yyy], -1)], -2
    )
    mats = np.concatenate([hx, hy], axis=1)  # (nv, 2k, 2, 2)
    lam_floor = 1.0 / h_max**2
    q = bound_matrix_Q(mats, lam_floor)
    return metric_M(q, mesh, n_target, h_min=h_min, h_max=h_max)


def bound_violation_stats(values: np.ndarray, mesh: Mesh2D, lam_floor: float):
    """Fraction of sampled directional interpolation curvatures above the bound.

    Diagnostic only: compares |e^T H(s) e| against e^T Q e at each vertex
    for the mesh edges around it, where H is the recovered Hessian.
    """
    values = np.asarray(values, dtype=float).reshape(-1, 1)
    nv = len(mesh.vertices)
    thirds = np.empty((nv, 1, 4))
    hessians = np.empty((nv, 2, 2))
    for v in range(nv):
        _, hess, third, _ = _spr_vertex(values, mesh, v)
        thirds[v] = third.T
        h = hess[:, 0]
        hessians[v] = [[h[0], h[1]], [h[1], h[2]]]
    xxx, xxy, xyy, yyy = (thirds[..., i] for i in range(4))
    hx = np.stack([np.stack([xxx, xxy], -1), np.stack([xxy, xyy], -1)], -2)
    hy = np.stack([np.stack([xxy, xyy], -1), np.stack([xyy, yyy], -1)], -2)
    q = bound_matrix_Q(np.concatenate([hx, hy], axis=1), lam_floor)

    checked = 0
    violated = 0
    for a, b in mesh.edges:
        e = mesh.vertices[b] - mesh.vertices[a]
        n = np.linalg.norm(e)
        if n == 0:
            continue
        e = e / n
        for v in (a, b):
            lhs = abs(e @ hessians[v] @ e)
            rhs = e @ q[v] @ e
            checked += 1
            if lhs > rhs * (1.0 + 1e-9):
                violated += 1
    return {"checked": checked, "violated": violated,
            "fraction": violated / max(checked, 1)}


# -- symmetric 2x2 helpers (plain floats, hot path of the remesher) ----------


def _sym_eig(a, b, c):
    half = 0.5 * (a + c)
    disc = math.hypot(0.5 * (a - c), b)
    l1 = half + disc
    l2 = half - disc
    if disc <= 1e-300 or disc <= 1e-15 * abs(half):
        return l1, l2, 1.0, 0.0
    # eigenvector for l1: pick the better-conditioned expression
    vx1, vy1 = b, l1 - a
    vx2, vy2 = l1 - c, b
    if vx1 * vx1 + vy1 * vy1 >= vx2 * vx2 + vy2 * vy2:
        vx, vy = vx1, vy1
    else:
        vx, vy = vx2, vy2
    n = math.hypot(vx, vy)
    return l1, l2, vx / n, vy / n


def _sym_func(a, b, c, f):
    l1, l2, cs, sn = _sym_eig(a, b, c)
    f1, f2 = f(l1), f(l2)
    return (
        f1 * cs * cs + f2 * sn * sn,
        (f1 - f2) * cs * sn,
        f1 * sn * sn + f2 * cs * cs,
    )


def _sym_exp(a, b, c):
    return _sym_func(a, b, c, math.exp)


def _sym_log(a, b, c):
    return _sym_func(a, b, c, math.log)


# -- local remesher -----------------------------------------------------------


class _Background:
    """Log-metric interpolation on the input mesh for new vertex positions.

    Point location is a hand-rolled scalar walk over the uniform grid of
    a SpatialIndex; the remesher queries one point at a time and the
    array front end would dominate the whole adaption otherwise.
    """

    def __init__(self, mesh: Mesh2D, metric: MetricField):
        self.mesh = mesh
        self.index = SpatialIndex(mesh)
        t = metric.tensors
        w, vecs = np.linalg.eigh(t)
        self.logm = np.einsum("...ij,...j,...kj->...ik", vecs, np.log(w), vecs)
        xmin, xmax, ymin, ymax = mesh.bounds
        self.diam = math.hypot(xmax - xmin, ymax - ymin)

        ix = self.index
        self._cell_start = ix.cell_start.tolist()
        self._cell_tris = ix.cell_tris.tolist()
        self._tris = mesh.triangles.tolist()
        self._v0 = mesh.vertices[mesh.triangles[:, 0]].tolist()
        self._inv = mesh.inv_jacobians.reshape(-1, 4).tolist()
        self._lm = [
            (m[0, 0], m[0, 1], m[1, 1]) for m in self.logm
        ]

    def _locate_scalar(self, x: float, y: float, tol: float):
        ix = self.index
        cx = int((x - ix.x0) / ix.dx)
        cy = int((y - ix.y0) / ix.dy)
        cx = 0 if cx < 0 else (ix.ncx - 1 if cx >= ix.ncx else cx)
        cy = 0 if cy < 0 else (ix.ncy - 1 if cy >= ix.ncy else cy)
        c = cx * ix.ncy + cy
        lo = -tol
        hi = 1.0 + tol
        for k in range(self._cell_start[c], self._cell_start[c + 1]):
            t = self._cell_tris[k]
            v0 = self._v0[t]
            inv = self._inv[t]
            rx = x - v0[0]
            ry = y - v0[1]
            b1 = inv[0] * rx + inv[1] * ry
            if b1 < lo or b1 > hi:
                continue
            b2 = inv[2] * rx + inv[3] * ry
            if b2 < lo or b2 > hi:
                continue
            b0 = 1.0 - b1 - b2
            if b0 < lo:
                continue
            return t, b0, b1, b2
        return -1, 0.0, 0.0, 0.0

    def log_metric_at(self, x: float, y: float):
        t, b0, b1, b2 = self._locate_scalar(x, y, 1e-10)
        if t < 0:
            t, b0, b1, b2 = self._locate_scalar(x, y, 1e-6)
        if t < 0:
            # fall back to the nearest vertex of the background mesh
            d = self.mesh.vertices - [x, y]
            v = int(np.argmin(np.einsum("nd,nd->n", d, d)))
            return self._lm[v]
        tri = self._tris[t]
        ma = self._lm[tri[0]]
        mb = self._lm[tri[1]]
        mc = self._lm[tri[2]]
        return (
            b0 * ma[0] + b1 * mb[0] + b2 * mc[0],
            b0 * ma[1] + b1 * mb[1] + b2 * mc[1],
            b0 * ma[2] + b1 * mb[2] + b2 * mc[2],
        )


class _Remesher:
    def __init__(self, mesh: Mesh2D, metric: MetricField):
        self.bg = _Background(mesh, metric)
        nv = len(mesh.vertices)
        self.px = mesh.vertices[:, 0].tolist()
        self.py = mesh.vertices[:, 1].tolist()
        self.logm = [tuple(x) for x in
                     self.bg.logm[:, [0, 0, 1], [0, 1, 1]].tolist()]
        self.mm = [_sym_exp(*lm) for lm in self.logm]
        xmin, xmax, ymin, ymax = mesh.bounds
        self.bounds = (xmin, xmax, ymin, ymax)
        tol = 1e-9 * max(self.bg.diam, 1.0)
        self.sides = []
        for x, y in mesh.vertices:
            s = set()
            if abs(x - xmin) <= tol:
                s.add("left")
            if abs(x - xmax) <= tol:
                s.add("right")
            if abs(y - ymin) <= tol:
                s.add("bottom")
            if abs(y - ymax) <= tol:
                s.add("top")
            self.sides.append(frozenset(s))
        self.tris: list = [tuple(t) for t in mesh.triangles.tolist()]
        self.v2t: list[set] = [set() for _ in range(nv)]
        for t, tri in enumerate(self.tris):
            for v in tri:
                self.v2t[v].add(t)
        self._qcache: dict[int, float] = {}
        # vertices whose star changed in the current pass; later passes
        # only revisit their neighbourhood instead of rescanning the mesh
        self.touched: set[int] = set()

    # geometry helpers

    def _area(self, a, b, c):
        return 0.5 * (
            (self.px[b] - self.px[a]) * (self.py[c] - self.py[a])
            - (self.px[c] - self.px[a]) * (self.py[b] - self.py[a])
        )

    def edge_len(self, a, b):
        ex = self.px[b] - self.px[a]
        ey = self.py[b] - self.py[a]
        ma = self.mm[a]
        mb = self.mm[b]
        la = ma[0] * ex * ex + 2.0 * ma[1] * ex * ey + ma[2] * ey * ey
        lb = mb[0] * ex * ex + 2.0 * mb[1] * ex * ey + mb[2] * ey * ey
        if la <= 0.0 or lb <= 0.0:
            return 0.0
        return (la * lb) ** 0.25

    def tri_quality(self, tri) -> float:
        a, b, c = tri
        area = self._area(a, b, c)
        if area <= 0.0:
            return -math.inf
        lab = self.edge_len(a, b)
        lbc = self.edge_len(b, c)
        lca = self.edge_len(c, a)
        s2 = lab * lab + lbc * lbc + lca * lca
        if s2 <= 0.0:
            return -math.inf
        la_ = self.logm[a]
        lb_ = self.logm[b]
        lc_ = self.logm[c]
        mt = _sym_exp(
            (la_[0] + lb_[0] + lc_[0]) / 3.0,
            (la_[1] + lb_[1] + lc_[1]) / 3.0,
            (la_[2] + lb_[2] + lc_[2]) / 3.0,
        )
        det = mt[0] * mt[2] - mt[1] * mt[1]
        if det <= 0.0:
            return -math.inf
        area_m = math.sqrt(det) * area
        shape = 4.0 * math.sqrt(3.0) * area_m / s2
        mean_l = (lab + lbc + lca) / 3.0
        return shape * math.exp(-abs(mean_l - 1.0))

    def quality(self, t: int) -> float:
        q = self._qcache.get(t)
        if q is None:
            q = self.tri_quality(self.tris[t])
            self._qcache[t] = q
        return q

    def _new_tri(self, tri) -> int:
        t = len(self.tris)
        self.tris.append(tri)
        for v in tri:
            self.v2t[v].add(t)
            self.touched.add(v)
        return t

    def _kill_tri(self, t: int):
        for v in self.tris[t]:
            self.v2t[v].discard(t)
            self.touched.add(v)
        self.tris[t] = None
        self._qcache.pop(t, None)

    def _new_vertex(self, x, y, sides) -> int:
        v = len(self.px)
        self.px.append(x)
        self.py.append(y)
        lm = self.bg.log_metric_at(x, y)
        self.logm.append(lm)
        self.mm.append(_sym_exp(*lm))
        self.sides.append(frozenset(sides))
        self.v2t.append(set())
        return v

    def edge_tris(self, a, b):
        return sorted(self.v2t[a] & self.v2t[b])

    def all_edges(self):
        """Deterministic (min, max) edge keys of the alive triangulation."""
        seen = set()
        out = []
        for t, tri in enumerate(self.tris):
            if tri is None:
                continue
            for i in range(3):
                a, b = tri[i], tri[(i + 1) % 3]
                key = (a, b) if a < b else (b, a)
                if key not in seen:
                    seen.add(key)
                    out.append(key)
        return out

    # operations

    def try_split(self, a, b) -> bool:
        tris = self.edge_tris(a, b)
        if not tris:
            return False
        old_q = min(self.quality(t) for t in tris)
        if len(tris) == 1:
            msides = self.sides[a] & self.sides[b]
        else:
            msides = frozenset()
        mx = 0.5 * (self.px[a] + self.px[b])
        my = 0.5 * (self.py[a] + self.py[b])
        xmin, xmax, ymin, ymax = self.bounds
        if "left" in msides:
            mx = xmin
        if "right" in msides:
            mx = xmax
        if "bottom" in msides:
            my = ymin
        if "top" in msides:
            my = ymax

        m = self._new_vertex(mx, my, msides)
        new_tris = []
        for t in tris:
            tri = self.tris[t]
            for i in range(3):
                u, w = tri[i], tri[(i + 1) % 3]
                if (u, w) in ((a, b), (b, a)):
                    other = tri[(i + 2) % 3]
                    new_tris.append((u, m, other))
                    new_tris.append((m, w, other))
        new_q = min(self.tri_quality(tri) for tri in new_tris)
        if not (new_q > old_q):
            # roll back the vertex
            self.px.pop()
            self.py.pop()
            self.logm.pop()
            self.mm.pop()
            self.sides.pop()
            self.v2t.pop()
            return False
        for t in tris:
            self._kill_tri(t)
        for tri in new_tris:
            self._new_tri(tri)
        return True

    def _link_ok(self, a, b):
        """Collapse link condition: common neighbours only via shared triangles."""
        na = set()
        for t in self.v2t[a]:
            na.update(self.tris[t])
        nb = set()
        for t in self.v2t[b]:
            nb.update(self.tris[t])
        common = (na & nb) - {a, b}
        opposite = set()
        for t in self.edge_tris(a, b):
            opposite.update(self.tris[t])
        opposite -= {a, b}
        return common == opposite

    def try_collapse(self, a, b) -> bool:
        tris = self.edge_tris(a, b)
        if not tris:
            return False
        boundary_edge = len(tris) == 1
        for kill, keep in ((a, b), (b, a)) if a < b else ((b, a), (a, b)):
            ks = self.sides[kill]
            if len(ks) >= 2:
                continue  # corners are pinned
            if len(ks) == 1 and not (boundary_edge and ks <= self.sides[keep]):
                continue
            if not self._link_ok(a, b):
                return False
            affected = sorted(self.v2t[kill])
            old_q = min(self.quality(t) for t in affected)
            new_tris = []
            ok = True
            for t in affected:
                tri = self.tris[t]
                if keep in tri:
                    continue  # dies with the edge
                retargeted = tuple(keep if v == kill else v for v in tri)
                q = self.tri_quality(retargeted)
                if not math.isfinite(q):
                    ok = False
                    break
                new_tris.append((retargeted, q))
            if not ok or not new_tris:
                continue
            new_q = min(q for _, q in new_tris)
            if not (new_q > old_q):
                continue
            for t in affected:
                self._kill_tri(t)
            for tri, _ in new_tris:
                self._new_tri(tri)
            return True
        return False

    def try_swap(self, a, b) -> bool:
        tris = self.edge_tris(a, b)
        if len(tris) != 2:
            return False
        t1, t2 = tris
        tri1, tri2 = self.tris[t1], self.tris[t2]
        c = next(v for v in tri1 if v not in (a, b))
        d = next(v for v in tri2 if v not in (a, b))
        if c == d or d in self._neighbors(c):
            return False
        # keep a consistent orientation: tri1 traverses a -> b, tri2 b -> a
        i = tri1.index(a)
        if tri1[(i + 1) % 3] != b:
            a, b = b, a
        cand = ((a, d, c), (d, b, c))
        old_q = min(self.quality(t1), self.quality(t2))
        q = [self.tri_quality(t) for t in cand]
        if not (min(q) > old_q):
            return False
        self._kill_tri(t1)
        self._kill_tri(t2)
        for tri in cand:
            self._new_tri(tri)
        return True

    def _neighbors(self, v):
        out = set()
        for t in self.v2t[v]:
            out.update(self.tris[t])
        out.discard(v)
        return out

    def try_smooth(self, v) -> bool:
        sides = self.sides[v]
        if len(sides) >= 2:
            return False
        tris = sorted(self.v2t[v])
        if not tris:
            return False
        if len(sides) == 1:
            side = next(iter(sides))
            nbrs = [u for u in self._neighbors(v) if side in self.sides[u]]
        else:
            nbrs = sorted(self._neighbors(v))
        if not nbrs:
            return False
        cx = sum(self.px[u] for u in nbrs) / len(nbrs)
        cy = sum(self.py[u] for u in nbrs) / len(nbrs)
        if len(sides) == 1:
            xmin, xmax, ymin, ymax = self.bounds
            side = next(iter(sides))
            if side == "left":
                cx = xmin
            elif side == "right":
                cx = xmax
            elif side == "bottom":
                cy = ymin
            else:
                cy = ymax
        old_x, old_y = self.px[v], self.py[v]
        old_lm, old_m = self.logm[v], self.mm[v]
        old_q = min(self.quality(t) for t in tris)
        for frac in (1.0, 0.5):
            nx = old_x + frac * (cx - old_x)
            ny = old_y + frac * (cy - old_y)
            if nx == old_x and ny == old_y:
                break
            self.px[v], self.py[v] = nx, ny
            lm = self.bg.log_metric_at(nx, ny)
            self.logm[v] = lm
            self.mm[v] = _sym_exp(*lm)
            improved = True
            for t in tris:
                if self.tri_quality(self.tris[t]) <= old_q:
                    improved = False
                    break
            if improved:
                for t in tris:
                    self._qcache.pop(t, None)
                # invalidate neighbours whose edge lengths changed
                self.touched.add(v)
                for u in self._neighbors(v):
                    self.touched.add(u)
                    for t in self.v2t[u]:
                        self._qcache.pop(t, None)
                return True
        self.px[v], self.py[v] = old_x, old_y
        self.logm[v], self.mm[v] = old_lm, old_m
        return False

    # driver

    def _edges_near(self, verts):
        """Deterministic edge keys of triangles touching the given vertices."""
        tris = set()
        for v in verts:
            if v < len(self.v2t):
                tris.update(self.v2t[v])
        seen = set()
        out = []
        for t in sorted(tris):
            tri = self.tris[t]
            if tri is None:
                continue
            for i in range(3):
                a, b = tri[i], tri[(i + 1) % 3]
                key = (a, b) if a < b else (b, a)
                if key not in seen:
                    seen.add(key)
                    out.append(key)
        return out

    def run(self, max_passes: int) -> int:
        total = 0
        scope = None  # None means the whole mesh
        for _ in range(max_passes):
            changed = 0
            self.touched = set()

            def edges():
                if scope is None:
                    return self.all_edges()
                return self._edges_near(scope)

            cand = edges()
            lens = {e: self.edge_len(*e) for e in cand}
            splits = sorted(
                (e for e in cand if lens[e] > SPLIT_LEN),
                key=lambda e: (-lens[e], e),
            )
            for a, b in splits:
                if self.edge_tris(a, b) and self.try_split(a, b):
                    changed += 1

            cand = edges() if changed else cand
            lens = {e: self.edge_len(*e) for e in cand}
            collapses = sorted(
                (e for e in cand if lens[e] < COLLAPSE_LEN),
                key=lambda e: (lens[e], e),
            )
            for a, b in collapses:
                if self.edge_tris(a, b) and self.try_collapse(a, b):
                    changed += 1

            for a, b in edges():
                if self.edge_tris(a, b) and self.try_swap(a, b):
                    changed += 1

            if scope is None:
                verts = range(len(self.px))
            else:
                grow = set(scope) | self.touched
                verts = sorted(
                    {u for v in grow if v < len(self.v2t) for u in self._neighbors(v)}
                    | grow
                )
            for v in verts:
                if v < len(self.v2t) and self.v2t[v] and self.try_smooth(v):
                    changed += 1

            total += changed
            if changed == 0:
                break
            # next pass only revisits the neighbourhood of this pass's changes
            scope = sorted(self.touched)
        return total

    def to_mesh(self) -> Mesh2D:
        alive = [t for t in self.tris if t is not None]
        used = sorted({v for tri in alive for v in tri})
        remap = {v: i for i, v in enumerate(used)}
        verts = np.array([[self.px[v], self.py[v]] for v in used])
        tris = np.array([[remap[v] for v in tri] for tri in alive], dtype=np.int64)
        return Mesh2D(verts, tris)


def adapt_mesh(mesh: Mesh2D, metric: MetricField, max_passes: int = 10) -> Mesh2D:
    """Remesh toward unit edge length in the metric by local operations.

    Runs passes of edge splits (longest first), edge collapses (shortest
    first), edge swaps and vertex smoothing; each operation must strictly
    improve the worst affected element quality.  Stops when a pass makes
    no change or after ``max_passes``.  Boundary vertices slide only
    along their side and corners are immovable, so the rectangle is
    preserved exactly.
    """
    if len(metric.tensors) != len(mesh.vertices):
        raise ValueError("metric is not per-vertex on this mesh")
    rm = _Remesher(mesh, metric)
    rm.run(max_passes)
    return rm.to_mesh()


# -- field transfer -----------------------------------------------------------


def transfer_fields(
    old_mesh: Mesh2D, values: np.ndarray, new_mesh: Mesh2D
) -> np.ndarray:
    """Interpolate nodal P2 columns from one mesh onto another.

    ``values`` is (p2_node_count_old,) or (p2_node_count_old, k).  Every
    new node is located in the old mesh (with a relaxed retry for
    boundary round-off) and evaluated through the quadratic basis, so
    fields that are globally quadratic transfer exactly.
    """
    values = np.asarray(values, dtype=float)
    squeeze = values.ndim == 1
    if squeeze:
        values = values[:, None]
    if values.shape[0] != old_mesh.p2_node_count:
        raise ValueError("values are not nodal on the old mesh")

    index = SpatialIndex(old_mesh)
    pts = new_mesh.nodes
    tri, bary = index.locate(pts)
    missing = tri < 0
    if missing.any():
        tri2, bary2 = index.locate(pts[missing], tol=1e-6)
        tri[missing] = tri2
        bary[missing] = bary2
        still = tri < 0
        if still.any():
            i = int(np.nonzero(still)[0][0])
            raise ValueError(
                f"transfer: node at {pts[i].tolist()} not found in the old mesh"
            )
    n = fem.shape_values(np.clip(bary, 0.0, 1.0))
    out = np.einsum("pa,pak->pk", n, values[old_mesh.p2_conn[tri]])
    return out[:, 0] if squeeze else out


def transfer_state(state, new_mesh: Mesh2D):
    """Transfer a solver state onto a new mesh."""
    from .solver import CoupledState

    packed = np.column_stack([state.v, state.p[:, None], state.phi[:, None]])
    moved = transfer_fields(state.mesh, packed, new_mesh)
    return CoupledState(new_mesh, moved[:, :2], moved[:, 2], moved[:, 3])
