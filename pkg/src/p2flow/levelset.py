"""Level-set tools: regularized Heaviside, curvature, interface geometry.

The level-set field phi is a signed distance, positive in fluid 1 (the
continuous liquid) and negative in fluid 2 (the gas).  All interface
quantities are regularized over a band of half-width ``eps`` around the
zero level.  Sign convention for curvature follows the raw second-form
expression, which is negative for a disc of fluid 2; the surface-tension
force flips it so the pressure jump across a convex gas region is
positive inside (Young-Laplace with Delta p = +sigma / R for a disc).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import fem
from .mesh import Mesh2D

__all__ = [
    "FluidPair",
    "InterfaceMesh",
    "heaviside_eps",
    "delta_eps",
    "blend_properties",
    "curvature",
    "csf_integrand",
    "extract_interface",
    "reinitialize",
]

# Below this gradient magnitude the interface normal is undefined.
GRAD_FLOOR = 1e-10


@dataclass(frozen=True)
class FluidPair:
    """Material parameters of the two phases plus interface regularization.

    rho1/mu1 belong to the phase where phi > 0, rho2/mu2 to phi < 0.
    ``sigma`` is the surface tension coefficient, ``gravity`` the
    magnitude of the downward body-force acceleration, and ``eps`` the
    Heaviside regularization half-width.
    """

    rho1: float
    rho2: float
    mu1: float
    mu2: float
    sigma: float
    gravity: float
    eps: float

    def __post_init__(self):
        if min(self.rho1, self.rho2) <= 0.0:
            raise ValueError("densities must be positive")
        if min(self.mu1, self.mu2) < 0.0:
            raise ValueError("viscosities must be non-negative")
        if self.eps <= 0.0:
            raise ValueError("eps must be positive")


def heaviside_eps(phi, eps: float):
    """Regularized Heaviside: 0 for phi < -eps, 1 for phi > eps, smooth between."""
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    phi = np.asarray(phi, dtype=float)
    t = phi / eps
    core = 0.5 * (1.0 + t + np.sin(np.pi * np.clip(t, -1.0, 1.0)) / np.pi)
    # clip so the bound holds exactly at t = +-1 despite sin roundoff
    out = np.where(t > 1.0, 1.0, np.where(t < -1.0, 0.0, np.clip(core, 0.0, 1.0)))
    return out if out.ndim else float(out)


def delta_eps(phi, eps: float):
    """Derivative of heaviside_eps with respect to phi."""
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    phi = np.asarray(phi, dtype=float)
    t = phi / eps
    core = (1.0 + np.cos(np.pi * np.clip(t, -1.0, 1.0))) / (2.0 * eps)
    out = np.where(np.abs(t) > 1.0, 0.0, core)
    return out if out.ndim else float(out)


def blend_properties(phi, fluids: FluidPair):
    """Pointwise density and viscosity from the level-set value."""
    h = heaviside_eps(phi, fluids.eps)
    rho = fluids.rho1 * h + fluids.rho2 * (1.0 - h)
    mu = fluids.mu1 * h + fluids.mu2 * (1.0 - h)
    return rho, mu

def curvature(values: np.ndarray, mesh: Mesh2D, tri: int, bary):
    """Interface curvature of the discrete level-set field at one point.

    Evaluates (g . H g - |g|^2 tr H) / |g|^3 from the P2 gradient g and
    the per-element-constant P2 Hessian H, with no smoothing or
    derivative recovery.  For a disc of fluid 2 (phi < 0 inside) this is
    -1/R.  Returns (kappa, degenerate); when |g| falls below the floor
    the curvature is reported as 0 with degenerate=True.
    """
    _, g, h = fem.interpolate(values, mesh, tri, bary)
    norm = float(np.hypot(g[0], g[1]))
    if norm < GRAD_FLOOR:
        return 0.0, True
    kappa = (g @ h @ g - norm * norm * np.trace(h)) / norm**3
    return float(kappa), False


def csf_integrand(values: np.ndarray, fluids: FluidPair, mesh: Mesh2D, tri: int, bary):
    """Pointwise continuum-surface-force density sigma * kappa * delta_eps * grad phi.

    The curvature sign is flipped from ``curvature`` so that the force
    implies an elevated pressure inside a convex region of fluid 2.
    Identically zero outside the regularization band.
    """
    val, g, _ = fem.interpolate(values, mesh, tri, bary)
    d = delta_eps(val, fluids.eps)
    if d == 0.0:
        return np.zeros(2)
    kappa, degenerate = curvature(values, mesh, tri, bary)
    if degenerate:
        return np.zeros(2)
    return fluids.sigma * (-kappa) * d * g


# -- interface extraction --------------------------------------------------

# Uniform subdivision of each element for contouring: sub-vertices at
# barycentric steps of 1/_SUB_N, _SUB_N^2 sub-triangles per element.
# Contouring P2 fields on the sub-triangles keeps the marching rule
# linear and unambiguous; the chord bias of the extracted polyline
# shrinks with the square of the step, and the reinitialization drift
# it causes shrinks with it.
_SUB_N = 16
_SUB_IJ = [(i, j) for i in range(_SUB_N + 1) for j in range(_SUB_N + 1 - i)]
_SUB_INDEX = {ij: k for k, ij in enumerate(_SUB_IJ)}


def _sub_triangles():
    up = []
    down = []
    for i, j in _SUB_IJ:
        if i + j <= _SUB_N - 1:
            up.append(
                (_SUB_INDEX[(i, j)], _SUB_INDEX[(i + 1, j)], _SUB_INDEX[(i, j + 1)])
            )
        if i + j <= _SUB_N - 2:
            down.append(
                (_SUB_INDEX[(i + 1, j)], _SUB_INDEX[(i + 1, j + 1)], _SUB_INDEX[(i, j + 1)])
            )
    return np.array(up + down, dtype=np.int64)


_SUB_TRIS = _sub_triangles()
_SUB_BARY = np.array(
    [[1.0 - (i + j) / _SUB_N, i / _SUB_N, j / _SUB_N] for i, j in _SUB_IJ]
)


@dataclass
class InterfaceMesh:
    """Straight segments approximating the zero level set.

    ``points`` has shape (m, 2, 2); segment k runs points[k, 0] ->
    points[k, 1] with the phi > 0 side on its left, so ``normals`` point
    into fluid 1.
    """

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2, 2)

    @property
    def normals(self) -> np.ndarray:
        d = self.points[:, 1] - self.points[:, 0]
        n = np.stack([-d[:, 1], d[:, 0]], axis=1)
        length = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(length > 0, length, 1.0)

    def total_length(self) -> float:
        d = self.points[:, 1] - self.points[:, 0]
        return float(np.linalg.norm(d, axis=1).sum())

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write("x0,y0,x1,y1\n")
            for (x0, y0), (x1, y1) in self.points:
                f.write(f"{x0:.17g},{y0:.17g},{x1:.17g},{y1:.17g}\n")


def extract_interface(values: np.ndarray, mesh: Mesh2D) -> InterfaceMesh:
    """Contour the zero level of a nodal P2 field.

    Each element is subdivided uniformly, the field is interpolated at
    the sub-vertices and contoured linearly inside every sub-triangle.
    Sub-vertex values that are exactly zero count as positive, which
    keeps segments unique across neighbouring sub-triangles.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != (mesh.p2_node_count,):
        raise ValueError("field is not nodal on this mesh")

    n_sub = fem.shape_values(_SUB_BARY)  # (np_sub, 6)
    coeffs = values[mesh.p2_conn]  # (nt, 6)
    phi_sub = coeffs @ n_sub.T  # (nt, np_sub)

    p = mesh.vertices[mesh.triangles]  # (nt, 3, 2)
    # physical coordinates of the sub-vertices per element
    xy_sub = np.einsum("pk,ekd->epd", _SUB_BARY, p)  # (nt, np_sub, 2)

    tri_phi = phi_sub[:, _SUB_TRIS]  # (nt, nt_sub, 3)
    tri_xy = xy_sub[:, _SUB_TRIS]  # (nt, nt_sub, 3, 2)

    pos = tri_phi >= 0.0
    npos = pos.sum(axis=2)
    cut = (npos == 1) | (npos == 2)
    if not cut.any():
        return InterfaceMesh(np.empty((0, 2, 2)))

    cph = tri_phi[cut]  # (m, 3)
    cxy = tri_xy[cut]  # (m, 3, 2)
    cpos = pos[cut]
    # Rotate each sub-triangle so vertex 0 is the odd one out.
    single_pos = cpos.sum(axis=1) == 1
    odd = np.where(single_pos, np.argmax(cpos, axis=1), np.argmax(~cpos, axis=1))
    order = (odd[:, None] + np.arange(3)[None, :]) % 3
    rows = np.arange(len(cph))[:, None]
    cph = cph[rows, order]
    cxy = cxy[rows, order]

    # Crossings on edges (0,1) and (0,2); denominators are nonzero because
    # vertex 0 has the opposite sign of vertices 1 and 2.
    t1 = cph[:, 0] / (cph[:, 0] - cph[:, 1])
    t2 = cph[:, 0] / (cph[:, 0] - cph[:, 2])
    p1 = cxy[:, 0] + t1[:, None] * (cxy[:, 1] - cxy[:, 0])
    p2 = cxy[:, 0] + t2[:, None] * (cxy[:, 2] - cxy[:, 0])

    # Orient so the positive side is to the left of p_start -> p_end.
    # With vertex 0 positive, going p1 -> p2 keeps vertex 0 on the left
    # (both lie on edges from vertex 0 and the triangle is CCW); with
    # vertex 0 negative the order flips.
    start = np.where(single_pos[:, None], p1, p2)
    end = np.where(single_pos[:, None], p2, p1)
    seg = np.stack([start, end], axis=1)

    length = np.linalg.norm(seg[:, 1] - seg[:, 0], axis=1)
    xmin, xmax, ymin, ymax = mesh.bounds
    diam = np.hypot(xmax - xmin, ymax - ymin)
    seg = seg[length > 1e-14 * max(diam, 1.0)]
    return InterfaceMesh(seg)


def _segment_distances(points: np.ndarray, segs: np.ndarray) -> np.ndarray:
    """Exact distance from each point to the nearest segment (brute force)."""
    a = segs[:, 0]
    d = segs[:, 1] - segs[:, 0]
    dd = np.einsum("sd,sd->s", d, d)
    dd = np.where(dd > 0.0, dd, 1.0)
    out = np.empty(len(points))
    # chunk points to bound the (chunk x segments) temporaries
    chunk = max(1, int(4e6 // max(len(segs), 1)))
    for i0 in range(0, len(points), chunk):
        p = points[i0 : i0 + chunk]
        w = p[:, None, :] - a[None, :, :]
        t = np.clip(np.einsum("psd,sd->ps", w, d) / dd[None, :], 0.0, 1.0)
        proj = a[None, :, :] + t[..., None] * d[None, :, :]
        dist = np.linalg.norm(p[:, None, :] - proj, axis=2)
        out[i0 : i0 + chunk] = dist.min(axis=1)
    return out


def reinitialize(values: np.ndarray, mesh: Mesh2D, eps: float) -> np.ndarray:
    """Rebuild phi as a truncated signed distance to its own zero level.

    The zero level is extracted geometrically, then every P2 node gets
    sign(old phi) * min(distance to the segment soup, 2 eps).  An empty
    interface leaves the field unchanged and emits a warning.
    """
    values = np.asarray(values, dtype=float)
    interface = extract_interface(values, mesh)
    if len(interface.points) == 0:
        warnings.warn("reinitialize: no interface found, field left unchanged")
        return values.copy()
    dist = _segment_distances(mesh.nodes, interface.points)
    dist = np.minimum(dist, 2.0 * eps)
    sign = np.where(values >= 0.0, 1.0, -1.0)
    return sign * dist
