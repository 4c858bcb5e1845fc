"""Quadratic Lagrange basis on the reference triangle and quadrature.

Reference element: vertices (0,0), (1,0), (0,1) with barycentric
coordinates (l0, l1, l2) = (1 - xi - eta, xi, eta).  Node order matches
``Mesh2D.p2_conn``: the three vertices, then the midpoints of edges
(0,1), (1,2), (2,0).  Geometry is linear, so reference gradients map to
physical ones through the constant inverse Jacobian and the physical
Hessian of any P2 function is constant per element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "QuadratureRule",
    "default_quadrature",
    "shape_eval",
    "interpolate",
    "element_tables",
]


def _bary(points) -> np.ndarray:
    b = np.asarray(points, dtype=float)
    if b.shape[-1] != 3:
        raise ValueError("barycentric points need 3 components")
    return b


def shape_values(bary) -> np.ndarray:
    """P2 shape function values, shape (..., 6)."""
    b = _bary(bary)
    l0, l1, l2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack(
        [
            l0 * (2.0 * l0 - 1.0),
            l1 * (2.0 * l1 - 1.0),
            l2 * (2.0 * l2 - 1.0),
            4.0 * l0 * l1,
            4.0 * l1 * l2,
            4.0 * l2 * l0,
        ],
        axis=-1,
    )


# Barycentric gradients w.r.t. (xi, eta).
_DL = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def shape_ref_gradients(bary) -> np.ndarray:
    """Reference-coordinate gradients, shape (..., 6, 2)."""
    b = _bary(bary)
    l = [b[..., i][..., None] for i in range(3)]
    g = np.empty(b.shape[:-1] + (6, 2))
    for i in range(3):
        g[..., i, :] = (4.0 * l[i] - 1.0) * _DL[i]
    pairs = ((0, 1), (1, 2), (2, 0))
    for k, (i, j) in enumerate(pairs):
        g[..., 3 + k, :] = 4.0 * (l[i] * _DL[j] + l[j] * _DL[i])
    return g


def shape_ref_hessians() -> np.ndarray:
    """Reference-coordinate Hessians, shape (6, 2, 2); constant for P2."""
    h = np.empty((6, 2, 2))
    for i in range(3):
        h[i] = 4.0 * np.outer(_DL[i], _DL[i])
    pairs = ((0, 1), (1, 2), (2, 0))
    for k, (i, j) in enumerate(pairs):
        h[3 + k] = 4.0 * (np.outer(_DL[i], _DL[j]) + np.outer(_DL[j], _DL[i]))
    return h


def shape_eval(bary):
    """Values, reference gradients and reference Hessians at one point.

    Returns (values (6,), gradients (6, 2), hessians (6, 2, 2)).
    """
    b = _bary(bary)
    if b.ndim != 1:
        raise ValueError("shape_eval takes a single barycentric point")
    if abs(float(b.sum()) - 1.0) > 1e-12:
        raise ValueError("barycentric coordinates must sum to 1")
    return shape_values(b), shape_ref_gradients(b), shape_ref_hessians()


@dataclass(frozen=True)
class QuadratureRule:
    """Symmetric rule on the reference triangle, weights summing to one."""

    points: np.ndarray  # (m, 3) barycentric
    weights: np.ndarray  # (m,)
    degree: int

    def __post_init__(self):
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("quadrature weights must sum to 1")
        if np.any(self.weights <= 0):
            raise ValueError("quadrature weights must be positive")


def _orbit3(a):
    b = 1.0 - 2.0 * a
    return [(b, a, a), (a, b, a), (a, a, b)]


def _orbit6(a, b):
    c = 1.0 - a - b
    return [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]


def default_quadrature() -> QuadratureRule:
    """Twelve-point rule exact for polynomials of total degree six."""
    pts = []
    wts = []
    for p in _orbit3(0.063089014491502228):
        pts.append(p)
        wts.append(0.050844906370206817)
    for p in _orbit3(0.249286745170910421):
        pts.append(p)
        wts.append(0.116786275726379366)
    for p in _orbit6(0.310352451033784405, 0.053145049844816947):
        pts.append(p)
        wts.append(0.082851075618373575)
    pts = np.array(pts)
    wts = np.array(wts)
    wts /= wts.sum()
    return QuadratureRule(points=pts, weights=wts, degree=6)


def interpolate(values: np.ndarray, mesh, tri: int, bary):
    """Evaluate a nodal P2 field inside one triangle.

    Returns (value, physical gradient (2,), physical Hessian (2, 2)).
    ``values`` has one entry per P2 node of ``mesh``.
    """
    b = _bary(bary)
    coeffs = np.asarray(values, dtype=float)[mesh.p2_conn[tri]]
    n = shape_values(b)
    g_ref = shape_ref_gradients(b)
    h_ref = shape_ref_hessians()
    inv = mesh.inv_jacobians[tri]
    # gradient: J^{-T} grad_ref, Hessian: J^{-T} H_ref J^{-1}
    g_phys = g_ref @ inv
    h_phys = np.einsum("ji,ajk,kl->ail", inv, h_ref, inv)
    val = float(n @ coeffs)
    grad = coeffs @ g_phys
    hess = np.einsum("a,aij->ij", coeffs, h_phys)
    return val, grad, hess


class ElementTables:
    """Per-mesh arrays used by vectorized assembly.

    All tables are built from the default degree-6 rule:

    - ``n``        (q, 6) shape values at quadrature points
    - ``w``        (q,) reference weights
    - ``grad``     (nt, q, 6, 2) physical shape gradients
    - ``hess``     (nt, 6, 2, 2) physical shape Hessians (constant in q)
    - ``xq``       (nt, q, 2) physical quadrature points
    - ``metric_g`` (nt, 2, 2) element metric G = J^{-1} J^{-T}
    """

    def __init__(self, mesh):
        rule = default_quadrature()
        self.rule = rule
        self.n = shape_values(rule.points)
        self.w = rule.weights
        g_ref = shape_ref_gradients(rule.points)  # (q, 6, 2)
        inv = mesh.inv_jacobians  # (nt, 2, 2)
        self.grad = np.einsum("eji,qaj->eqai", inv, g_ref)
        h_ref = shape_ref_hessians()
        self.hess = np.einsum("eji,ajk,ekl->eail", inv, h_ref, inv)
        p0 = mesh.vertices[mesh.triangles[:, 0]]
        ref_xy = rule.points[:, 1:]  # (q, 2) reference coordinates
        self.xq = p0[:, None, :] + np.einsum("eij,qj->eqi", mesh.jacobians, ref_xy)
        self.metric_g = np.einsum("eik,ejk->eij", inv, inv)
        self.conn = mesh.p2_conn
        self.area = mesh.areas
        self.wq = self.w[None, :] * self.area[:, None]  # (nt, q) physical weights


def element_tables(mesh) -> ElementTables:
    """Cached ElementTables for a mesh."""
    tab = mesh._cache.get("element_tables")
    if tab is None:
        tab = ElementTables(mesh)
        mesh._cache["element_tables"] = tab
    return tab


def element_metric_G(mesh, tri: int) -> np.ndarray:
    """Element metric tensor G = B^T B with B the transposed inverse Jacobian."""
    inv = mesh.inv_jacobians[tri]
    return inv @ inv.T
