"""Monolithic implicit solver for two-phase flow with a level-set interface.

Unknowns are nodal (vx, vy, p, phi) on every P2 node, advanced with
backward Euler.  The weak form is a residual-based variational
multiscale discretization: Galerkin terms for momentum, mass and
level-set transport plus fine-scale velocity, pressure and level-set
closures built from the strong residuals and element stabilization
tensors.  The Jacobian is assembled element by element with forward
differences of the element residual, so any new physics added to the
residual is linearized automatically.

Surface tension enters as sigma * kappa * grad(H_h) where H_h is the
P2 interpolant of the regularized Heaviside of phi.  Writing the force
as the gradient of a nodal field makes it discretely a gradient, so a
pressure field in the same space cancels it exactly and a resting disc
stays at rest up to solver tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .fem import element_metric_G
from .levelset import FluidPair, delta_eps, heaviside_eps, reinitialize
from .mesh import Mesh2D

__all__ = [
    "CoupledState",
    "SolverConfig",
    "BoundaryConditions",
    "NewtonResult",
    "AdvanceResult",
    "TimeStepUnderflowError",
    "element_metric_G",
    "stabilization_taus",
    "fine_scale",
    "assemble_residual",
    "assemble_jacobian_nd",
    "newton_solve",
    "advance_increment",
]

FIELDS_PER_NODE = 4  # vx, vy, p, phi


class TimeStepUnderflowError(RuntimeError):
    """Raised when repeated halving drives dt below dt_max * 2**-20."""


@dataclass
class CoupledState:
    """Nodal solution fields sharing one mesh: v (n, 2), p (n,), phi (n,)."""

    mesh: Mesh2D
    v: np.ndarray
    p: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        n = self.mesh.p2_node_count
        self.v = np.ascontiguousarray(self.v, dtype=float).reshape(n, 2)
        self.p = np.ascontiguousarray(self.p, dtype=float).reshape(n)
        self.phi = np.ascontiguousarray(self.phi, dtype=float).reshape(n)

    @classmethod
    def zeros(cls, mesh: Mesh2D) -> "CoupledState":
        n = mesh.p2_node_count
        return cls(mesh, np.zeros((n, 2)), np.zeros(n), np.zeros(n))

    def vector(self) -> np.ndarray:
        """Interleaved dof vector [vx0, vy0, p0, phi0, vx1, ...]."""
        n = self.mesh.p2_node_count
        u = np.empty(FIELDS_PER_NODE * n)
        u[0::4] = self.v[:, 0]
        u[1::4] = self.v[:, 1]
        u[2::4] = self.p
        u[3::4] = self.phi
        return u

    @classmethod
    def from_vector(cls, mesh: Mesh2D, u: np.ndarray) -> "CoupledState":
        v = np.stack([u[0::4], u[1::4]], axis=1)
        return cls(mesh, v, u[2::4].copy(), u[3::4].copy())

    def copy(self) -> "CoupledState":
        return CoupledState(self.mesh, self.v.copy(), self.p.copy(), self.phi.copy())


@dataclass(frozen=True)
class SolverConfig:
    """Numerical parameters of the implicit solve and time stepping."""

    dt_max: float
    newton_tol: float = 1e-6
    newton_abs_tol: float = 0.0
    max_newton_iters: int = 10
    linear_tol: float = 1e-10
    gmres_restart: int = 200
    gmres_max_restarts: int = 10
    ilu_drop_tol: float = 1e-6
    ilu_fill_factor: float = 40.0
    nd_delta: float = 1e-8
    c_i: float = 36.0
    dt_growth: float = 1.5
    dt_shrink: float = 0.5
    stabilization: bool = True
    curvature_override: Optional[Callable] = None

    def __post_init__(self):
        if self.dt_max <= 0:
            raise ValueError("dt_max must be positive")


_BC_KINDS = ("noslip", "freeslip", "natural")


@dataclass(frozen=True)
class BoundaryConditions:
    """Velocity condition per rectangle side.

    noslip pins both velocity components, freeslip pins only the normal
    component (sides are axis aligned, so that is vx on left/right and
    vy on bottom/top), natural leaves the side free.  Pressure and the
    level set never carry strong conditions.
    """

    left: str = "noslip"
    right: str = "noslip"
    bottom: str = "noslip"
    top: str = "noslip"

    def __post_init__(self):
        for side in ("left", "right", "bottom", "top"):
            kind = getattr(self, side)
            if kind not in _BC_KINDS:
                raise ValueError(f"unknown boundary condition {kind!r} on {side}")

    def constrained_dofs(self, mesh: Mesh2D):
        """Sorted dof ids with prescribed values (all zero here).

        Without a natural boundary the pressure is only determined up to
        a constant, so the gauge is fixed by pinning the pressure at node
        0 to zero.
        """
        dofs: set[int] = set()
        enclosed = True
        for side in ("left", "right", "bottom", "top"):
            kind = getattr(self, side)
            if kind == "natural":
                enclosed = False
                continue
            nodes = mesh.boundary_nodes(side)
            if kind == "noslip":
                comps = (0, 1)
            else:  # freeslip: normal component only
                comps = (0,) if side in ("left", "right") else (1,)
            for c in comps:
                dofs.update((FIELDS_PER_NODE * nodes + c).tolist())
        if enclosed:
            dofs.add(2)
        idx = np.array(sorted(dofs), dtype=np.int64)
        return idx, np.zeros(len(idx))


def stabilization_taus(v, rho, mu, G, dt, c_i: float = 36.0):
    """Stabilization parameters at one quadrature point.

    tau_v = ((2/dt)^2 + v.Gv + c_i (mu/rho)^2 G:G)^(-1/2)
    tau_p = 1 / (tr(G) tau_v)
    tau_phi = ((2/dt)^2 + v.Gv)^(-1/2)
    """
    v = np.asarray(v, dtype=float)
    G = np.asarray(G, dtype=float)
    inv_dt2 = 0.0 if np.isinf(dt) else (2.0 / dt) ** 2
    vgv = float(v @ G @ v)
    gg = float(np.sum(G * G))
    tau_v = 1.0 / np.sqrt(inv_dt2 + vgv + c_i * (mu / rho) ** 2 * gg)
    tau_phi = 1.0 / np.sqrt(inv_dt2 + vgv)
    tau_p = 1.0 / (np.trace(G) * tau_v)
    return tau_v, tau_p, tau_phi


def fine_scale(r_mom, r_mass, r_adv, taus, rho):
    """Fine-scale velocity, pressure and level-set values from residuals."""
    tau_v, tau_p, tau_phi = taus
    v_prime = -(tau_v / rho) * np.asarray(r_mom, dtype=float)
    p_prime = -tau_p * rho * r_mass
    phi_prime = -tau_phi * r_adv
    return v_prime, p_prime, phi_prime


# -- vectorized element kernel ----------------------------------------------


def _element_coeffs(state: CoupledState) -> np.ndarray:
    """Gather nodal unknowns per element, shape (nt, 6, 4)."""
    conn = state.mesh.p2_conn
    out = np.empty(conn.shape + (FIELDS_PER_NODE,))
    out[..., 0] = state.v[conn, 0]
    out[..., 1] = state.v[conn, 1]
    out[..., 2] = state.p[conn]
    out[..., 3] = state.phi[conn]
    return out


def _element_residuals(
    tab: fem.ElementTables,
    fluids: FluidPair,
    coeffs: np.ndarray,
    old_coeffs: np.ndarray,
    dt: float,
    config: SolverConfig,
) -> np.ndarray:
    """Quadrature-weighted element residual rows.

    ``coeffs`` may carry leading batch axes over (nt, 6, 4); the old
    state is fixed.  Returns rows shaped like ``coeffs``: (..., nt, 6, 4)
    ordered (momentum x, momentum y, mass, level set) per local node.
    """
    N = tab.n  # (q, 6)
    WQ = tab.wq  # (nt, q)
    grad = tab.grad  # (nt, q, 6, 2)

    vals = np.einsum("qa,...eaf->...eqf", N, coeffs)
    grads = np.einsum("eqad,...eaf->...efqd", grad, coeffs)
    hess = np.einsum("eaij,...eaf->...efij", tab.hess, coeffs)

    old_vals = np.einsum("qa,eaf->eqf", N, old_coeffs)
    old_v = old_vals[..., :2]
    old_phi = old_vals[..., 3]

    v = vals[..., :2]
    p = vals[..., 2]
    phi = vals[..., 3]
    gv = grads[..., :2, :, :]  # (..., e, i, q, d) with d the derivative axis
    gv = np.moveaxis(gv, -3, -2)  # (..., e, q, i, d)
    gp = grads[..., 2, :, :]  # (..., e, q, d)
    gphi = grads[..., 3, :, :]
    hv = hess[..., :2, :, :]  # (..., e, i, 2, 2)
    hphi = hess[..., 3, :, :]

    inv_dt = 1.0 / dt
    vdot = (v - old_v) * inv_dt
    phidot = (phi - old_phi) * inv_dt

    # material properties from the pointwise level set
    H = heaviside_eps(phi, fluids.eps)
    D = delta_eps(phi, fluids.eps)
    rho = fluids.rho1 * H + fluids.rho2 * (1.0 - H)
    mu = fluids.mu1 * H + fluids.mu2 * (1.0 - H)
    dmu = (fluids.mu1 - fluids.mu2) * D[..., None] * gphi  # (..., e, q, d)

    # surface tension: gradient of the nodal Heaviside interpolant
    g_nodal = heaviside_eps(coeffs[..., 3], fluids.eps)  # (..., e, 6)
    gradH = np.einsum("eqad,...ea->...eqd", grad, g_nodal)

    if config.curvature_override is not None:
        kappa = np.asarray(config.curvature_override(tab.xq), dtype=float)
        kappa = np.broadcast_to(kappa, phi.shape)
    else:
        gnorm = np.linalg.norm(gphi, axis=-1)
        ghg = np.einsum("...qd,...dk,...qk->...q", gphi, hphi, gphi)
        trh = np.trace(hphi, axis1=-2, axis2=-1)[..., None]
        denom = np.where(gnorm > 1e-10, gnorm, 1.0) ** 3
        kappa_raw = np.where(gnorm > 1e-10, (ghg - gnorm**2 * trh) / denom, 0.0)
        kappa = -kappa_raw  # positive for a convex region of fluid 2
    f_s = fluids.sigma * kappa[..., None] * gradH

    conv = np.einsum("...qid,...qd->...qi", gv, v)
    divv = gv[..., 0, 0] + gv[..., 1, 1]
    lap = np.einsum("...eidd->...ei", hv)  # (..., e, i)
    graddiv = hv[..., 0, :, 0] + hv[..., 1, :, 1]  # d_i d_j v_j
    strain = gv + np.swapaxes(gv, -1, -2)
    visc = mu[..., None] * (lap + graddiv)[..., None, :]  # (..., e, q, i)
    visc = visc + np.einsum("...qij,...qj->...qi", strain, dmu)

    grav = np.zeros_like(f_s)
    grav[..., 1] = rho * fluids.gravity  # residual term -f_g with f_g = -rho g e_y

    r_mom = rho[..., None] * (vdot + conv) - visc + gp + grav + f_s
    r_adv = phidot + np.einsum("...qd,...qd->...q", v, gphi)

    if config.stabilization:
        G = tab.metric_g  # (nt, 2, 2)
        vgv = np.einsum("...qi,...ij,...qj->...q", v, G, v)
        gg = np.einsum("eij,eij->e", G, G)[:, None]
        trg = (G[:, 0, 0] + G[:, 1, 1])[:, None]
        inv_dt2 = 0.0 if np.isinf(dt) else (2.0 * inv_dt) ** 2
        tau_v = 1.0 / np.sqrt(inv_dt2 + vgv + config.c_i * (mu / rho) ** 2 * gg)
        tau_phi = 1.0 / np.sqrt(inv_dt2 + vgv)
        tau_p = 1.0 / (trg * tau_v)
        v_pr = -(tau_v / rho)[..., None] * r_mom
        p_pr = -tau_p * rho * divv
        phi_pr = -tau_phi * r_adv
    else:
        v_pr = np.zeros_like(r_mom)
        p_pr = np.zeros_like(divv)
        phi_pr = np.zeros_like(r_adv)

    # coefficient of N_a in the momentum rows
    mom_na = rho[..., None] * (vdot + conv) + grav + f_s
    mom_na = mom_na + rho[..., None] * np.einsum("...qid,...qd->...qi", gv, v_pr)
    # coefficient of grad(N_a): T[i, j] contracts with d_j N_a
    T = mu[..., None, None] * strain
    pp = p + p_pr
    T = T - pp[..., None, None] * np.eye(2)
    T = T - rho[..., None, None] * v_pr[..., :, None] * (v + v_pr)[..., None, :]

    mom = np.einsum("qa,eq,...eqi->...eai", N, WQ, mom_na)
    mom += np.einsum("eqaj,eq,...eqij->...eai", grad, WQ, T)

    cont = np.einsum("qa,eq,...eq->...ea", N, WQ, -divv)
    cont += np.einsum("eqaj,eq,...eqj->...ea", grad, WQ, v_pr)

    ls = np.einsum("qa,eq,...eq->...ea", N, WQ, r_adv)
    ls -= np.einsum("eqaj,eq,...eqj->...ea", grad, WQ, v * phi_pr[..., None])

    rows = np.concatenate(
        [mom, cont[..., None], ls[..., None]],
        axis=-1,
    )
    return rows


class _Workspace:
    """Per-(mesh, bc) scatter tables for assembly."""

    def __init__(self, mesh: Mesh2D, bc: BoundaryConditions):
        self.tab = fem.element_tables(mesh)
        conn = mesh.p2_conn
        nt = len(conn)
        dof = (FIELDS_PER_NODE * conn[:, :, None] + np.arange(FIELDS_PER_NODE)).reshape(
            nt, 24
        )
        self.dof = dof
        self.ndof = FIELDS_PER_NODE * mesh.p2_node_count
        self.bc_dofs, self.bc_values = bc.constrained_dofs(mesh)
        self.free_mask = np.ones(self.ndof, dtype=bool)
        self.free_mask[self.bc_dofs] = False

        rows = np.broadcast_to(dof[:, :, None], (nt, 24, 24))
        cols = np.broadcast_to(dof[:, None, :], (nt, 24, 24))
        keep = self.free_mask[rows].ravel()
        self.jac_rows = np.concatenate([rows.ravel()[keep], self.bc_dofs])
        self.jac_cols = np.concatenate([cols.ravel()[keep], self.bc_dofs])
        self.jac_keep = keep


def _workspace(mesh: Mesh2D, bc: BoundaryConditions) -> _Workspace:
    key = ("solver_ws", bc)
    ws = mesh._cache.get(key)
    if ws is None:
        ws = _Workspace(mesh, bc)
        mesh._cache[key] = ws
    return ws


def _check_finite(rows: np.ndarray, mesh: Mesh2D):
    if np.isfinite(rows).all():
        return
    bad = np.nonzero(~np.isfinite(rows).all(axis=(-2, -1)))[-1]
    raise FloatingPointError(
        f"non-finite element residual in triangles {bad[:10].tolist()}"
    )


def assemble_residual(
    state_new: CoupledState,
    state_old: CoupledState,
    dt: float,
    fluids: FluidPair,
    bc: BoundaryConditions,
    config: SolverConfig,
) -> np.ndarray:
    """Global residual vector with Dirichlet rows replaced by (value - prescribed)."""
    mesh = state_new.mesh
    ws = _workspace(mesh, bc)
    coeffs = _element_coeffs(state_new)
    old = _element_coeffs(state_old)
    rows = _element_residuals(ws.tab, fluids, coeffs, old, dt, config)
    _check_finite(rows, mesh)
    r = np.zeros(ws.ndof)
    np.add.at(r, ws.dof.ravel(), rows.reshape(-1))
    u = state_new.vector()
    r[ws.bc_dofs] = u[ws.bc_dofs] - ws.bc_values
    return r


def assemble_jacobian_nd(
    state_new: CoupledState,
    state_old: CoupledState,
    dt: float,
    fluids: FluidPair,
    bc: BoundaryConditions,
    config: SolverConfig,
) -> sp.csr_matrix:
    """Jacobian by element-local forward differences of the element residual.

    Each of the 24 element unknowns is perturbed by nd_delta on the
    element's own copy of the nodal values; scatter-add of the element
    columns reproduces the global derivative because a global nodal
    perturbation only acts through the elements containing that node.
    Dirichlet rows become identity.
    """
    mesh = state_new.mesh
    ws = _workspace(mesh, bc)
    coeffs = _element_coeffs(state_new)
    old = _element_coeffs(state_old)
    delta = config.nd_delta

    base = _element_residuals(ws.tab, fluids, coeffs, old, dt, config)
    _check_finite(base, mesh)
    nt = coeffs.shape[0]
    base_flat = base.reshape(nt, 24)

    jac = np.empty((nt, 24, 24))
    # batched perturbations: one kernel call per chunk of local dofs
    chunk = 6
    for j0 in range(0, 24, chunk):
        js = range(j0, min(j0 + chunk, 24))
        pert = np.broadcast_to(coeffs, (len(js),) + coeffs.shape).copy()
        for k, j in enumerate(js):
            pert[k, :, j // 4, j % 4] += delta
        rows = _element_residuals(ws.tab, fluids, pert, old, dt, config)
        rows = rows.reshape(len(js), nt, 24)
        for k, j in enumerate(js):
            jac[:, :, j] = (rows[k] - base_flat) / delta

    data = np.concatenate([jac.ravel()[ws.jac_keep], np.ones(len(ws.bc_dofs))])
    a = sp.coo_matrix(
        (data, (ws.jac_rows, ws.jac_cols)), shape=(ws.ndof, ws.ndof)
    )
    return a.tocsr()


# -- Newton and time stepping ------------------------------------------------


@dataclass
class NewtonResult:
    state: CoupledState
    status: str  # converged | max_iters | diverged | linear_failure
    iterations: int
    residual_norms: list
    linear_iters: int

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _factor(A: sp.csr_matrix, config: SolverConfig):
    """Equilibrate and incompletely factor a Jacobian.

    Row scales differ by many orders of magnitude between momentum,
    continuity and transport rows (and with strong element size
    grading), which makes threshold dropping in the ILU unreliable.
    The system is symmetrically equilibrated by the diagonal first:
    A' = D A D with D = diag(|a_ii|^-1/2), solved for y = D^-1 x.
    """
    d = np.abs(A.diagonal())
    scale = 1.0 / np.sqrt(np.where(d > 0.0, d, 1.0))
    D = sp.diags(scale)
    eq = (D @ A @ D).tocsc()
    try:
        ilu = spla.spilu(
            eq, drop_tol=config.ilu_drop_tol, fill_factor=config.ilu_fill_factor
        )
    except RuntimeError:
        # singular pivot in the incomplete factorization: nudge the diagonal
        ilu = spla.spilu(
            eq + 1e-8 * sp.identity(A.shape[0], format="csc"),
            drop_tol=config.ilu_drop_tol,
            fill_factor=config.ilu_fill_factor,
        )
    return ilu, scale


def _solve_linear(
    A: sp.csr_matrix, b: np.ndarray, config: SolverConfig, precond=None
):
    """GMRES with an incomplete LU preconditioner at relative tolerance.

    ``precond`` is an optional (ilu, scale) pair from a previous Newton
    iteration; a stale factorization is fine as a preconditioner as long
    as GMRES still reaches the tolerance, and skipping the refactor is a
    large saving.  Callers fall back to a fresh factor when the reused
    one fails.
    """
    if precond is None:
        precond = _factor(A, config)
    ilu, scale = precond
    D = sp.diags(scale)
    eq = (D @ A @ D).tocsr()
    beq = scale * b
    M = spla.LinearOperator(eq.shape, ilu.solve)
    count = [0]

    def cb(_):
        count[0] += 1

    y, info = spla.gmres(
        eq,
        beq,
        rtol=config.linear_tol,
        atol=0.0,
        restart=config.gmres_restart,
        maxiter=config.gmres_max_restarts,
        M=M,
        callback=cb,
        callback_type="pr_norm",
    )
    return scale * y, info, count[0], precond


def newton_solve(
    state_guess: CoupledState,
    state_old: CoupledState,
    dt: float,
    fluids: FluidPair,
    bc: BoundaryConditions,
    config: SolverConfig,
) -> NewtonResult:
    """Damped-free Newton iteration on the fully coupled increment.

    Convergence: masked residual norm below newton_tol relative to the
    first iterate's norm (or below newton_abs_tol).  A rise of the norm
    between consecutive iterations reports divergence; hitting
    max_newton_iters reports non-convergence.  Both are ordinary
    outcomes for the caller's time-step control.
    """
    mesh = state_guess.mesh
    ws = _workspace(mesh, bc)
    u = state_guess.vector()
    u[ws.bc_dofs] = ws.bc_values
    state = CoupledState.from_vector(mesh, u)

    norms = []
    linear_total = 0
    r = assemble_residual(state, state_old, dt, fluids, bc, config)
    rn = float(np.linalg.norm(r[ws.free_mask]))
    norms.append(rn)
    ref = rn

    def converged(x):
        return x <= config.newton_tol * ref or x <= config.newton_abs_tol or x == 0.0

    if converged(rn):
        return NewtonResult(state, "converged", 0, norms, 0)

    precond = None
    for it in range(1, config.max_newton_iters + 1):
        A = assemble_jacobian_nd(state, state_old, dt, fluids, bc, config)
        du, info, iters, precond = _solve_linear(A, -r, config, precond)
        if info != 0 and it > 1:
            # the reused factorization went stale: refactor and retry
            du, info, iters2, precond = _solve_linear(A, -r, config, None)
            iters += iters2
        linear_total += iters
        if info != 0:
            return NewtonResult(state, "linear_failure", it, norms, linear_total)
        u = state.vector() + du
        state = CoupledState.from_vector(mesh, u)
        r = assemble_residual(state, state_old, dt, fluids, bc, config)
        rn = float(np.linalg.norm(r[ws.free_mask]))
        norms.append(rn)
        if converged(rn):
            return NewtonResult(state, "converged", it, norms, linear_total)
        if rn > norms[-2]:
            return NewtonResult(state, "diverged", it, norms, linear_total)
    return NewtonResult(state, "max_iters", config.max_newton_iters, norms, linear_total)


@dataclass
class AdvanceResult:
    state: CoupledState
    dt_used: float
    dt_next: float
    newton: NewtonResult
    halvings: int
    linear_iters_total: int


def advance_increment(
    state_old: CoupledState,
    dt: float,
    fluids: FluidPair,
    bc: BoundaryConditions,
    config: SolverConfig,
    reinit: bool = True,
) -> AdvanceResult:
    """One accepted time increment with automatic step halving.

    Failed solves (non-convergence, divergence, linear failure) halve dt
    and retry from the old state.  After success: on a first-try solve
    the next step grows by dt_growth up to dt_max, after any halving it
    stays at the accepted value.  The level set is reinitialized after
    every accepted increment.
    """
    if dt > config.dt_max * (1.0 + 1e-12):
        raise ValueError("dt exceeds dt_max")
    dt_try = dt
    halvings = 0
    linear_total = 0
    while True:
        res = newton_solve(state_old.copy(), state_old, dt_try, fluids, bc, config)
        linear_total += res.linear_iters
        if res.converged:
            break
        halvings += 1
        dt_try *= config.dt_shrink
        if dt_try < config.dt_max * 2.0**-20:
            raise TimeStepUnderflowError(
                f"time step underflow: dt={dt_try:.3e} after {halvings} halvings"
            )
    state = res.state
    if reinit:
        state = CoupledState(
            state.mesh, state.v, state.p, reinitialize(state.phi, state.mesh, fluids.eps)
        )
    if halvings == 0:
        dt_next = min(config.dt_growth * dt_try, config.dt_max)
    else:
        dt_next = dt_try
    return AdvanceResult(state, dt_try, dt_next, res, halvings, linear_total)
