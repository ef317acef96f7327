import math

import numpy as np
import pytest
from numpy.polynomial.legendre import leggauss

from ddseq.errors import ContractError
from ddseq.flowseq import (
    DirectPoissonSolver,
    FlowState,
    SequenceConfig,
    VelocityBC,
    convection_load,
    divergence_load,
    flow_step,
    gradient_load,
    l2_norm,
    synthetic_rhs,
    taylor_green_bc,
    taylor_green_pressure,
    taylor_green_state,
    taylor_green_velocity,
    write_fields_csv,
)
from ddseq.linalg import spmv
from ddseq.meshfem import BoundaryCondition, assemble_mass, build_grid


def pressure_pin(mesh):
    return BoundaryCondition.at_nodes(np.array([0]), 0.0)


class TestSequenceConfig:
    def test_mode_validation(self):
        with pytest.raises(ContractError):
            SequenceConfig(mode="chaotic")
        with pytest.raises(ContractError):
            SequenceConfig(decay=0.0)
        with pytest.raises(ContractError):
            SequenceConfig(period=0)

    def test_defaults(self):
        cfg = SequenceConfig()
        assert cfg.mode == "stationary"
        assert cfg.steps == 200 and cfg.period == 20


class TestSyntheticRhs:
    def test_stateless_and_stationary(self):
        mesh = build_grid(4, 4, 1.0, 1.0)
        cfg = SequenceConfig(mode="stationary", seed=7)
        a = synthetic_rhs(cfg, mesh, 3)
        b = synthetic_rhs(cfg, mesh, 120)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (mesh.n_nodes,)

    def test_transient_settles_geometrically(self):
        mesh = build_grid(4, 4, 1.0, 1.0)
        decay = 12.0
        cfg = SequenceConfig(mode="transient", decay=decay, seed=7)
        base = synthetic_rhs(SequenceConfig(mode="stationary", seed=7), mesh, 0)
        d3 = synthetic_rhs(cfg, mesh, 3) - base
        d4 = synthetic_rhs(cfg, mesh, 4) - base
        ratio = np.linalg.norm(d3) / np.linalg.norm(d4)
        assert ratio == pytest.approx(math.exp(1.0 / decay), rel=1e-12)

    def test_periodic_repeats_bitwise(self):
        mesh = build_grid(4, 4, 1.0, 1.0)
        cfg = SequenceConfig(mode="periodic", period=6, seed=3)
        for step in (0, 2, 5):
            np.testing.assert_array_equal(
                synthetic_rhs(cfg, mesh, step),
                synthetic_rhs(cfg, mesh, step + 6),
            )
        assert not np.array_equal(
            synthetic_rhs(cfg, mesh, 1), synthetic_rhs(cfg, mesh, 2)
        )

    def test_seed_changes_sequence(self):
        mesh = build_grid(4, 4, 1.0, 1.0)
        a = synthetic_rhs(SequenceConfig(seed=1), mesh, 0)
        b = synthetic_rhs(SequenceConfig(seed=2), mesh, 0)
        assert not np.array_equal(a, b)


class TestLoads:
    def test_divergence_free_field_gives_zero(self):
        mesh = build_grid(5, 4, 1.0, 1.0)
        u = np.column_stack([mesh.node_x, -mesh.node_y])
        b = divergence_load(mesh, u, dt=0.1)
        np.testing.assert_allclose(b, 0.0, atol=1e-13)

    def test_unit_divergence_matches_mass_rowsums(self):
        mesh = build_grid(4, 3, 1.0, 1.0)
        dt = 0.25
        u = np.column_stack([mesh.node_x, np.zeros(mesh.n_nodes)])
        b = divergence_load(mesh, u, dt=dt)
        mass_rows = assemble_mass(mesh).to_dense() @ np.ones(mesh.n_nodes)
        np.testing.assert_allclose(b, -mass_rows / dt, rtol=1e-13, atol=1e-14)

    def test_divergence_load_is_linear(self, rng):
        mesh = build_grid(4, 4, 1.0, 1.0)
        u1 = rng.standard_normal((mesh.n_nodes, 2))
        u2 = rng.standard_normal((mesh.n_nodes, 2))
        lhs = divergence_load(mesh, 2.0 * u1 - u2)
        rhs = 2.0 * divergence_load(mesh, u1) - divergence_load(mesh, u2)
        np.testing.assert_allclose(lhs, rhs, atol=1e-13)
        np.testing.assert_allclose(
            divergence_load(mesh, u1, dt=2.0),
            0.5 * divergence_load(mesh, u1, dt=1.0),
            atol=1e-14,
        )

    def test_gradient_of_linear_pressure(self):
        mesh = build_grid(4, 5, 1.0, 1.0)
        p = 2.0 * mesh.node_x + 3.0 * mesh.node_y
        g = gradient_load(mesh, p)
        mass_rows = assemble_mass(mesh).to_dense() @ np.ones(mesh.n_nodes)
        np.testing.assert_allclose(g[:, 0], 2.0 * mass_rows, rtol=1e-12)
        np.testing.assert_allclose(g[:, 1], 3.0 * mass_rows, rtol=1e-12)

    def test_convection_vanishes_for_constant_velocity(self):
        mesh = build_grid(4, 4, 1.0, 1.0)
        u = np.column_stack(
            [np.full(mesh.n_nodes, 0.7), np.full(mesh.n_nodes, -1.3)]
        )
        np.testing.assert_allclose(convection_load(mesh, u), 0.0, atol=1e-14)
        np.testing.assert_allclose(
            convection_load(mesh, np.zeros((mesh.n_nodes, 2))), 0.0, atol=0.0
        )

    def test_convection_matches_higher_order_quadrature(self, rng):
        # independent oracle: per-element 3x3 Gauss integration; the
        # integrand is polynomial of degree three per direction, so both
        # rules are exact and must agree to rounding
        mesh = build_grid(3, 3, 1.0, 1.0)
        u = rng.standard_normal((mesh.n_nodes, 2))
        gp, gw = leggauss(3)
        ref = np.zeros((mesh.n_nodes, 2))
        for e in range(mesh.n_elements):
            nodes = mesh.connectivity[e]
            for xi, wx in zip(gp, gw):
                for eta, wy in zip(gp, gw):
                    s = 0.25 * np.array([
                        (1 - xi) * (1 - eta),
                        (1 + xi) * (1 - eta),
                        (1 + xi) * (1 + eta),
                        (1 - xi) * (1 + eta),
                    ])
                    dsx = 0.25 * np.array(
                        [-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)]
                    ) * (2.0 / mesh.dx)
                    dsy = 0.25 * np.array(
                        [-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)]
                    ) * (2.0 / mesh.dy)
                    uq = s @ u[nodes, 0]
                    vq = s @ u[nodes, 1]
                    scale = wx * wy * mesh.dx * mesh.dy / 4.0
                    for c in range(2):
                        g = uq * (dsx @ u[nodes, c]) + vq * (dsy @ u[nodes, c])
                        ref[nodes, c] += scale * g * s
        got = convection_load(mesh, u)
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-13)


class TestVelocityBC:
    def test_no_slip_zeroes_the_boundary(self):
        mesh = build_grid(4, 4, 1.0, 1.0)
        bc = VelocityBC.no_slip(mesh)
        bc_u, bc_v = bc.at_time(mesh, 3.0)
        np.testing.assert_array_equal(bc_u.nodes, mesh.all_boundary_nodes())
        np.testing.assert_array_equal(bc_u.values, 0.0)
        np.testing.assert_array_equal(bc_v.values, 0.0)

    def test_scalar_data_broadcasts(self):
        mesh = build_grid(2, 2, 1.0, 1.0)
        bc = VelocityBC(np.array([0, 1, 2]), lambda x, y, t: (1.5, t))
        bc_u, bc_v = bc.at_time(mesh, 2.0)
        np.testing.assert_array_equal(bc_u.values, [1.5, 1.5, 1.5])
        np.testing.assert_array_equal(bc_v.values, [2.0, 2.0, 2.0])

    def test_time_and_coordinates_reach_the_function(self):
        mesh = build_grid(2, 2, 1.0, 1.0)
        nodes = np.array([1, 2])
        bc = VelocityBC(nodes, lambda x, y, t: (x * t, y))
        bc_u, bc_v = bc.at_time(mesh, 2.0)
        np.testing.assert_allclose(bc_u.values, mesh.node_x[nodes] * 2.0)
        np.testing.assert_allclose(bc_v.values, mesh.node_y[nodes])


class TestDirectPoissonSolver:
    def test_setup_once_and_manufactured_solution(self, rng):
        mesh = build_grid(6, 6, 1.0, 1.0)
        bc = pressure_pin(mesh)
        solver = DirectPoissonSolver(mesh, bc)
        assert solver.setup_count == 1
        g = rng.standard_normal(mesh.n_nodes)
        g[0] = 0.0
        load = spmv(solver.K_full, g)
        field, report = solver.solve(load)
        assert report.converged
        np.testing.assert_allclose(field, g, atol=1e-10)
        assert report.residual_history[0] <= 1e-12

    def test_dirichlet_values_imposed(self, rng):
        mesh = build_grid(4, 4, 1.0, 1.0)
        bc = BoundaryCondition.on_edges(mesh, ["left"], value=2.0)
        solver = DirectPoissonSolver(mesh, bc)
        field, _ = solver.solve(rng.standard_normal(mesh.n_nodes))
        np.testing.assert_array_equal(field[bc.nodes], 2.0)


class TestFlowStep:
    def test_one_step_bookkeeping(self):
        mesh = build_grid(8, 8, 1.0, 1.0)
        nu, dt = 0.01, 0.01
        state = taylor_green_state(mesh, nu, dt)
        bc = taylor_green_bc(mesh, nu)
        solver = DirectPoissonSolver(mesh, pressure_pin(mesh))
        new_state, info = flow_step(state, mesh, bc, solver)
        assert new_state.t == pytest.approx(dt)
        assert len(info["momentum_reports"]) == 2
        assert all(r.converged for r in info["momentum_reports"])
        assert info["corrector_report"].converged
        np.testing.assert_allclose(
            new_state.p - state.p - new_state.psi,
            -nu * info["divergence_projection"],
            atol=1e-13,
        )
        # Dirichlet data at the new time is imposed exactly
        u_ex, v_ex = taylor_green_velocity(
            mesh.node_x[bc.nodes], mesh.node_y[bc.nodes], dt, nu
        )
        np.testing.assert_array_equal(new_state.u[bc.nodes, 0], u_ex)
        np.testing.assert_array_equal(new_state.u[bc.nodes, 1], v_ex)

    def test_operator_cache_survives_steps(self):
        mesh = build_grid(6, 6, 1.0, 1.0)
        state = taylor_green_state(mesh, 0.01, 0.01)
        bc = taylor_green_bc(mesh, 0.01)
        solver = DirectPoissonSolver(mesh, pressure_pin(mesh))
        s1, _ = flow_step(state, mesh, bc, solver)
        ops = s1.cache["ops"]
        s2, _ = flow_step(s1, mesh, bc, solver)
        assert s2.cache["ops"] is ops
        assert solver.setup_count == 1

    def test_advective_limit_enforced(self):
        mesh = build_grid(4, 4, 1.0, 1.0)
        u = np.ones((mesh.n_nodes, 2))
        state = FlowState(
            u=u, p=np.zeros(mesh.n_nodes), psi=np.zeros(mesh.n_nodes),
            dt=1.0, nu=0.01,
        )
        bc = VelocityBC.no_slip(mesh)
        solver = DirectPoissonSolver(mesh, pressure_pin(mesh))
        with pytest.raises(ContractError):
            flow_step(state, mesh, bc, solver)

    def test_taylor_green_error_shrinks_under_refinement(self):
        t_end, nu = 0.1, 0.01
        errs = {}
        for n, dt in ((8, 0.02), (16, 0.005)):
            mesh = build_grid(n, n, 1.0, 1.0)
            state = taylor_green_state(mesh, nu, dt)
            bc = taylor_green_bc(mesh, nu)
            solver = DirectPoissonSolver(mesh, pressure_pin(mesh))
            steps = round(t_end / dt)
            for _ in range(steps):
                state, _ = flow_step(state, mesh, bc, solver)
            assert state.t == pytest.approx(t_end)
            u_ex, v_ex = taylor_green_velocity(
                mesh.node_x, mesh.node_y, state.t, nu
            )
            errs[n] = l2_norm(mesh, state.u - np.column_stack([u_ex, v_ex]))
        assert errs[16] < errs[8]
        assert errs[8] / errs[16] >= 3.0


class TestHelpers:
    def test_taylor_green_fields(self):
        u, v = taylor_green_velocity(np.array([0.5]), np.array([0.0]), 0.3, 0.02)
        a = math.exp(-2.0 * math.pi ** 2 * 0.02 * 0.3)
        assert u[0] == pytest.approx(a)
        assert v[0] == pytest.approx(-0.0)
        p = taylor_green_pressure(np.array([0.0]), np.array([0.0]), 0.0, 0.02)
        assert p[0] == pytest.approx(0.5)

    def test_l2_norm_of_constant(self):
        mesh = build_grid(5, 3, 2.0, 1.5)
        c = -0.75
        vals = np.full(mesh.n_nodes, c)
        area = 2.0 * 1.5
        assert l2_norm(mesh, vals) == pytest.approx(
            abs(c) * math.sqrt(area), rel=1e-12
        )
        stack = np.column_stack([vals, np.zeros(mesh.n_nodes)])
        assert l2_norm(mesh, stack, mass=assemble_mass(mesh)) == pytest.approx(
            abs(c) * math.sqrt(area), rel=1e-12
        )

    def test_fields_csv(self, tmp_path):
        mesh = build_grid(2, 2, 1.0, 1.0)
        state = taylor_green_state(mesh, 0.01, 0.05)
        path = tmp_path / "fields.csv"
        write_fields_csv(mesh, state, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "node,x,y,u,v,p"
        assert len(lines) == 1 + mesh.n_nodes
        cells = lines[1].split(",")
        assert cells[0] == "0"
        assert float(cells[5]) == pytest.approx(0.5)
