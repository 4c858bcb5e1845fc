"""Coupled-solver checks: stabilization algebra, assembly, Newton, stepping.

The residual assembly is verified against an independent integrator (a
tensor-product Gauss rule mapped onto each triangle), the Jacobian
against central differences of the residual, and the force balance on
two analytic equilibria where the discrete solution is exact: a
hydrostatic column and a disc with prescribed constant curvature.
"""

import numpy as np
import pytest

from p2flow import fem, solver
from p2flow.levelset import FluidPair, heaviside_eps
from p2flow.mesh import build_rectangle_mesh
from p2flow.solver import (
    BoundaryConditions,
    CoupledState,
    SolverConfig,
    TimeStepUnderflowError,
    advance_increment,
    assemble_jacobian_nd,
    assemble_residual,
    fine_scale,
    newton_solve,
    stabilization_taus,
)


def disc_distance(mesh, center, radius):
    """Signed distance to a circle, negative inside (fluid 2)."""
    d = np.hypot(mesh.nodes[:, 0] - center[0], mesh.nodes[:, 1] - center[1])
    return d - radius


class TestStabilizationTaus:
    G = np.array([[48.0, -16.0], [-16.0, 48.0]])

    def test_tau_p_reciprocal_identity(self):
        """tau_p * tau_v * tr(G) = 1 by construction."""
        tau_v, tau_p, _ = stabilization_taus(
            [0.3, -0.2], rho=2.0, mu=0.5, G=self.G, dt=0.01
        )
        assert abs(tau_p * tau_v * np.trace(self.G) - 1.0) < 1e-14

    def test_steady_limit(self):
        """At dt = inf the transient term drops out of both tau_v and tau_phi."""
        v = np.array([0.4, 0.1])
        rho, mu, ci = 1.5, 0.2, 36.0
        tau_v, _, tau_phi = stabilization_taus(v, rho, mu, self.G, np.inf, c_i=ci)
        vgv = v @ self.G @ v
        gg = np.sum(self.G * self.G)
        assert abs(tau_v - 1.0 / np.sqrt(vgv + ci * (mu / rho) ** 2 * gg)) < 1e-15
        assert abs(tau_phi - 1.0 / np.sqrt(vgv)) < 1e-15

    def test_small_dt_limit(self):
        """For tiny dt both time-scale taus approach dt/2."""
        tau_v, _, tau_phi = stabilization_taus(
            [0.4, 0.1], rho=1.0, mu=0.1, G=self.G, dt=1e-9
        )
        assert abs(tau_v - 5e-10) < 1e-13 * 5e-10 + 1e-22
        assert abs(tau_phi - 5e-10) < 1e-13 * 5e-10 + 1e-22

    def test_tau_phi_dominates_tau_v(self):
        """tau_phi drops the viscous contribution so it is never smaller."""
        rng = np.random.default_rng(11)
        for _ in range(20):
            v = rng.standard_normal(2)
            tau_v, _, tau_phi = stabilization_taus(
                v, rho=1.0, mu=rng.uniform(0.01, 2.0), G=self.G, dt=0.05
            )
            assert tau_phi >= tau_v


def test_fine_scale_closures():
    taus = (0.3, 2.0, 0.4)
    v_pr, p_pr, phi_pr = fine_scale([1.0, -2.0], 0.5, 3.0, taus, rho=2.0)
    assert np.allclose(v_pr, [-0.15, 0.3])
    assert p_pr == pytest.approx(-2.0)
    assert phi_pr == pytest.approx(-1.2)


class TestResidualOracle:
    def test_galerkin_terms_match_independent_quadrature(self):
        """Assembled residual vs a 4x4 Gauss rule on the collapsed square.

        Single phase (constant level set), no stabilization, steady:
        what remains is convection, viscous stress, pressure and the
        divergence row, all polynomial, so the two rules must agree to
        roundoff.  Measured agreement is about 4e-14; asserted at 1e-10.
        """
        gl, glw = np.polynomial.legendre.leggauss(4)
        u = 0.5 * (gl + 1.0)
        w1 = 0.5 * glw
        U, V = np.meshgrid(u, u, indexing="ij")
        W = np.outer(w1, w1).ravel() * (1.0 - U).ravel()
        X = U.ravel()
        Y = (V * (1.0 - U)).ravel()
        bary = np.stack([1.0 - X - Y, X, Y], axis=1)
        assert abs(W.sum() - 0.5) < 1e-14

        mesh = build_rectangle_mesh(1.0, 1.0, 3, 3)
        fluids = FluidPair(
            rho1=1.0, rho2=1.0, mu1=3.0, mu2=3.0, sigma=0.0, gravity=0.0, eps=0.1
        )
        bc = BoundaryConditions()
        config = SolverConfig(dt_max=np.inf, stabilization=False)
        rng = np.random.default_rng(0)
        state = CoupledState.zeros(mesh)
        state.v[:] = rng.standard_normal(state.v.shape)
        state.p[:] = rng.standard_normal(state.p.shape)
        state.phi[:] = 1.0

        r = assemble_residual(state, state.copy(), np.inf, fluids, bc, config)

        n = fem.shape_values(bary)
        gref = fem.shape_ref_gradients(bary)
        r2 = np.zeros_like(r)
        conn = mesh.p2_conn
        mu = 3.0
        for e in range(len(mesh.triangles)):
            gphys = gref @ mesh.inv_jacobians[e]
            vv = state.v[conn[e]]
            pp = state.p[conn[e]]
            gv = np.einsum("qad,ai->qid", gphys, vv)
            vq = n @ vv
            pq = n @ pp
            conv = np.einsum("qid,qd->qi", gv, vq)
            strain = gv + np.swapaxes(gv, -1, -2)
            for q in range(len(W)):
                wq = 2.0 * W[q] * mesh.areas[e]
                T = mu * strain[q] - pq[q] * np.eye(2)
                for a in range(6):
                    na = conn[e][a]
                    r2[4 * na : 4 * na + 2] += wq * (n[q, a] * conv[q] + T @ gphys[q, a])
                    r2[4 * na + 2] += wq * n[q, a] * (-(gv[q, 0, 0] + gv[q, 1, 1]))
        free = solver._workspace(mesh, bc).free_mask
        scale = np.max(np.abs(r[free]))
        err = np.max(np.abs(r[free] - r2[free]))
        assert err < 1e-10 * scale, f"oracle mismatch {err:.3e} at scale {scale:.2f}"

    def test_constrained_rows_report_gap_to_prescribed(self):
        mesh = build_rectangle_mesh(1.0, 1.0, 2, 2)
        fluids = FluidPair(
            rho1=1.0, rho2=1.0, mu1=1.0, mu2=1.0, sigma=0.0, gravity=0.0, eps=0.2
        )
        bc = BoundaryConditions()
        state = CoupledState.zeros(mesh)
        state.v[:] = 0.7
        state.phi[:] = 1.0
        r = assemble_residual(
            state, state.copy(), 0.1, fluids, bc, SolverConfig(dt_max=1.0)
        )
        dofs, vals = bc.constrained_dofs(mesh)
        assert np.allclose(r[dofs], state.vector()[dofs] - vals)


class TestJacobian:
    def test_matches_central_differences_along_random_direction(self):
        """J w against (r(u + h w) - r(u - h w)) / 2h for a two-phase state."""
        mesh = build_rectangle_mesh(1.0, 1.0, 4, 4)
        fluids = FluidPair(
            rho1=1.0, rho2=0.1, mu1=0.5, mu2=0.05, sigma=1.2, gravity=0.98, eps=0.22
        )
        bc = BoundaryConditions()
        config = SolverConfig(dt_max=1.0)
        rng = np.random.default_rng(0)
        state = CoupledState.zeros(mesh)
        state.phi[:] = disc_distance(mesh, (0.5, 0.5), 0.3)
        state.v[:] = 0.1 * rng.standard_normal(state.v.shape)
        state.p[:] = rng.standard_normal(state.p.shape)
        state.phi += 0.02 * rng.standard_normal(state.phi.shape)
        old = state.copy()
        old.v[:] = 0.0
        dt = 0.01

        J = assemble_jacobian_nd(state, old, dt, fluids, bc, config)
        u0 = state.vector()
        w = rng.standard_normal(len(u0))
        w /= np.linalg.norm(w)
        h = 1e-6
        rp = assemble_residual(
            CoupledState.from_vector(mesh, u0 + h * w), old, dt, fluids, bc, config
        )
        rm = assemble_residual(
            CoupledState.from_vector(mesh, u0 - h * w), old, dt, fluids, bc, config
        )
        fd = (rp - rm) / (2.0 * h)
        jw = J @ w
        scale = np.max(np.abs(jw))
        err = np.max(np.abs(jw - fd))
        assert err < 1e-5 * scale, f"direction derivative off by {err:.3e} / {scale:.3e}"


class TestEquilibria:
    def test_hydrostatic_column(self):
        """Closed box of heavy fluid at rest: p = -rho g y, v stays zero.

        The linear pressure lies in the P2 space, so the discrete
        equilibrium is exact and one implicit increment must reproduce
        it to solver tolerance.
        """
        mesh = build_rectangle_mesh(1.0, 2.0, 4, 8)
        fluids = FluidPair(
            rho1=1000.0, rho2=1000.0, mu1=1.0, mu2=1.0, sigma=0.0, gravity=0.98, eps=0.5
        )
        state = CoupledState.zeros(mesh)
        state.phi[:] = 1.0
        out = advance_increment(
            state,
            0.01,
            fluids,
            BoundaryConditions(),
            SolverConfig(dt_max=0.01),
            reinit=False,
        )
        assert out.newton.converged
        p_exact = -1000.0 * 0.98 * mesh.nodes[:, 1]
        p_exact -= p_exact[0]  # gauge: pressure pinned at node 0
        perr = np.max(np.abs(out.state.p - p_exact)) / np.max(np.abs(p_exact))
        vmax = np.max(np.hypot(out.state.v[:, 0], out.state.v[:, 1]))
        assert perr < 1e-6, f"hydrostatic pressure error {perr:.2e}"
        assert vmax < 1e-8, f"spurious velocity {vmax:.2e}"

    def test_prescribed_curvature_disc_is_balanced(self):
        """Disc with exact constant curvature: Laplace jump, no currents.

        With kappa = 1/R prescribed, p = sigma kappa (1 - H(phi)) + C is
        an exact discrete solution because the nodal Heaviside lies in
        the P2 space; velocities stay at the Newton noise floor.
        """
        mesh = build_rectangle_mesh(2.0, 2.0, 8, 8)
        radius, sigma = 0.6, 10.0
        fluids = FluidPair(
            rho1=1.0, rho2=0.1, mu1=0.0, mu2=0.0, sigma=sigma, gravity=0.0, eps=0.35
        )
        config = SolverConfig(
            dt_max=0.001,
            curvature_override=lambda xq: np.full(xq.shape[:-1], 1.0 / radius),
        )
        state = CoupledState.zeros(mesh)
        state.phi[:] = disc_distance(mesh, (1.0, 1.0), radius)
        out = advance_increment(
            state, 0.001, fluids, BoundaryConditions(), config, reinit=False
        )
        assert out.newton.converged
        jump = sigma / radius
        p_exact = jump * (1.0 - heaviside_eps(out.state.phi, fluids.eps))
        p_exact -= p_exact[0]
        perr = np.max(np.abs(out.state.p - p_exact)) / jump
        vmax = np.max(np.hypot(out.state.v[:, 0], out.state.v[:, 1]))
        assert perr < 1e-6, f"Laplace pressure error {perr:.2e}"
        assert vmax < 1e-8, f"parasitic currents {vmax:.2e}"


class TestBoundaryConditions:
    def test_noslip_everywhere_pins_all_wall_velocities_and_gauge(self):
        mesh = build_rectangle_mesh(1.0, 1.0, 3, 3)
        dofs, vals = BoundaryConditions().constrained_dofs(mesh)
        wall = set()
        for side in ("left", "right", "bottom", "top"):
            wall.update(mesh.boundary_nodes(side).tolist())
        expect = {4 * n + c for n in wall for c in (0, 1)} | {2}
        assert set(dofs.tolist()) == expect
        assert np.all(vals == 0.0)

    def test_freeslip_pins_normal_component_only(self):
        mesh = build_rectangle_mesh(1.0, 1.0, 3, 3)
        bc = BoundaryConditions(left="freeslip", top="freeslip")
        dofs = set(bc.constrained_dofs(mesh)[0].tolist())
        corner = {n for n in mesh.boundary_nodes("left") if n in mesh.boundary_nodes("top")}
        for n in mesh.boundary_nodes("left"):
            assert 4 * n + 0 in dofs
            if n not in corner and n not in mesh.boundary_nodes("bottom"):
                assert 4 * n + 1 not in dofs
        for n in mesh.boundary_nodes("top"):
            assert 4 * n + 1 in dofs

    def test_natural_side_releases_pressure_gauge(self):
        mesh = build_rectangle_mesh(1.0, 1.0, 3, 3)
        bc = BoundaryConditions(top="natural")
        dofs = set(bc.constrained_dofs(mesh)[0].tolist())
        assert 2 not in dofs
        walls = set(mesh.boundary_nodes("left")) | set(mesh.boundary_nodes("right"))
        for n in mesh.boundary_nodes("top"):
            if n not in walls:  # corners stay pinned through the side walls
                assert 4 * n + 0 not in dofs and 4 * n + 1 not in dofs

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown boundary condition"):
            BoundaryConditions(left="slip")


class TestNewton:
    def _setup(self):
        mesh = build_rectangle_mesh(1.0, 1.0, 3, 3)
        fluids = FluidPair(
            rho1=1.0, rho2=0.1, mu1=0.1, mu2=0.01, sigma=0.5, gravity=0.98, eps=0.25
        )
        state = CoupledState.zeros(mesh)
        state.phi[:] = disc_distance(mesh, (0.5, 0.5), 0.25)
        return mesh, fluids, state

    def test_converges_and_reports_norm_history(self):
        _, fluids, state = self._setup()
        res = newton_solve(
            state.copy(), state, 0.01, fluids, BoundaryConditions(), SolverConfig(dt_max=0.01)
        )
        assert res.status == "converged" and res.converged
        assert res.iterations >= 1
        assert len(res.residual_norms) == res.iterations + 1
        assert res.residual_norms[-1] < 1e-6 * res.residual_norms[0]
        assert res.linear_iters > 0

    def test_unreachable_tolerance_reports_max_iters(self):
        _, fluids, state = self._setup()
        config = SolverConfig(dt_max=0.01, newton_tol=0.0, max_newton_iters=2)
        res = newton_solve(
            state.copy(), state, 0.01, fluids, BoundaryConditions(), config
        )
        assert res.status == "max_iters"
        assert not res.converged
        assert res.iterations == 2


class TestAdvanceIncrement:
    def _setup(self):
        mesh = build_rectangle_mesh(1.0, 1.0, 3, 3)
        fluids = FluidPair(
            rho1=1.0, rho2=0.1, mu1=0.1, mu2=0.01, sigma=0.5, gravity=0.98, eps=0.25
        )
        state = CoupledState.zeros(mesh)
        state.phi[:] = disc_distance(mesh, (0.5, 0.5), 0.25)
        return fluids, state

    def test_rejects_dt_above_dt_max(self):
        fluids, state = self._setup()
        with pytest.raises(ValueError, match="dt exceeds dt_max"):
            advance_increment(
                state, 0.02, fluids, BoundaryConditions(), SolverConfig(dt_max=0.01)
            )

    def test_growth_law_after_clean_solve(self):
        fluids, state = self._setup()
        config = SolverConfig(dt_max=0.01)
        out = advance_increment(state, 0.004, fluids, BoundaryConditions(), config)
        assert out.halvings == 0
        assert out.dt_used == pytest.approx(0.004)
        assert out.dt_next == pytest.approx(0.006)  # 1.5x growth
        out2 = advance_increment(state, 0.008, fluids, BoundaryConditions(), config)
        assert out2.dt_next == pytest.approx(0.01)  # clipped at dt_max

    def test_underflow_after_persistent_failures(self):
        """A tolerance no iteration count can reach forces halving to underflow."""
        fluids, state = self._setup()
        config = SolverConfig(dt_max=0.01, newton_tol=0.0, max_newton_iters=1)
        with pytest.raises(TimeStepUnderflowError):
            advance_increment(state, 0.01, fluids, BoundaryConditions(), config)

    def test_reinit_flag_controls_level_set_rescaling(self):
        """A doubled distance field is pulled back to unit slope only with reinit."""
        fluids, state = self._setup()
        state.phi *= 2.0
        config = SolverConfig(dt_max=1e-4)
        kept = advance_increment(
            state, 1e-4, fluids, BoundaryConditions(), config, reinit=False
        )
        fixed = advance_increment(
            state, 1e-4, fluids, BoundaryConditions(), config, reinit=True
        )
        assert np.allclose(kept.state.v, fixed.state.v, atol=1e-12)
        band = np.abs(state.phi) < 0.2
        ratio = np.median(fixed.state.phi[band] / kept.state.phi[band])
        assert abs(ratio - 0.5) < 0.05, f"reinit should halve the slope, got {ratio:.3f}"


class TestCoupledState:
    def test_vector_roundtrip(self):
        mesh = build_rectangle_mesh(1.0, 1.0, 2, 2)
        rng = np.random.default_rng(5)
        state = CoupledState(
            mesh,
            rng.standard_normal((mesh.p2_node_count, 2)),
            rng.standard_normal(mesh.p2_node_count),
            rng.standard_normal(mesh.p2_node_count),
        )
        back = CoupledState.from_vector(mesh, state.vector())
        assert np.array_equal(back.v, state.v)
        assert np.array_equal(back.p, state.p)
        assert np.array_equal(back.phi, state.phi)

    def test_interleaving_order(self):
        mesh = build_rectangle_mesh(1.0, 1.0, 2, 2)
        state = CoupledState.zeros(mesh)
        state.v[3] = (1.0, 2.0)
        state.p[3] = 3.0
        state.phi[3] = 4.0
        u = state.vector()
        assert np.array_equal(u[12:16], [1.0, 2.0, 3.0, 4.0])

    def test_copy_is_independent(self):
        mesh = build_rectangle_mesh(1.0, 1.0, 2, 2)
        a = CoupledState.zeros(mesh)
        b = a.copy()
        b.v[0, 0] = 9.0
        assert a.v[0, 0] == 0.0

    def test_bad_shapes_rejected(self):
        mesh = build_rectangle_mesh(1.0, 1.0, 2, 2)
        with pytest.raises(ValueError):
            CoupledState(mesh, np.zeros((3, 2)), np.zeros(3), np.zeros(3))


def test_config_requires_positive_dt_max():
    with pytest.raises(ValueError, match="dt_max"):
        SolverConfig(dt_max=0.0)
