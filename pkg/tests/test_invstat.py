import numpy as np
import pytest

from spinesim import dynamics as dyn
from spinesim import invstat as ist
from spinesim import numopt
from spinesim import trajectory as trj
from spinesim.spine import Pose, cable_vectors, node_positions


@pytest.fixture(scope="module")
def start_positions(spine2d):
    return node_positions(spine2d, [Pose([0.0, 0.1], [0.0])])


class TestAssembleNodal:
    def test_shape_16x10(self, spine2d, start_positions):
        nodal = ist.assemble_nodal(spine2d, start_positions)
        assert nodal.A.shape == (16, 10)
        assert nodal.p.shape == (16,)

    def test_gravity_entries(self, spine2d, start_positions):
        nodal = ist.assemble_nodal(spine2d, start_positions)
        assert np.all(nodal.p[:8] == 0.0)  # horizontal components
        assert nodal.p[8:] == pytest.approx([-0.0325 * 9.81] * 8)
        assert nodal.p[12] == pytest.approx(-0.318825)

    def test_block_definition(self, spine2d, start_positions):
        nodal = ist.assemble_nodal(spine2d, start_positions)
        C = spine2d.connectivity
        x, z = start_positions[:, 0], start_positions[:, 1]
        assert np.allclose(nodal.A[:8], C.T @ np.diag(C @ x))
        assert np.allclose(nodal.A[8:], C.T @ np.diag(C @ z))


class TestReductionMatrices:
    def test_collapse_matrix(self, spine2d):
        red = ist.reduction_matrices(spine2d)
        assert np.array_equal(red.K, np.array([
            [1, 1, 1, 1, 0, 0, 0, 0],
            [0, 0, 0, 0, 1, 1, 1, 1.0]]))

    def test_bar_elimination(self, spine2d):
        red = ist.reduction_matrices(spine2d)
        assert red.H.shape == (10, 4)
        assert np.array_equal(red.H[:4], np.eye(4))
        assert np.all(red.H[4:] == 0.0)
        q = np.array([1.0, 2.0, 3.0, 4.0])
        assert np.array_equal(red.H @ q, np.concatenate([q, np.zeros(6)]))

    def test_moving_body_selection(self, spine2d):
        red = ist.reduction_matrices(spine2d)
        values = np.arange(8.0)
        assert np.array_equal(red.W @ values, values[4:])
        assert red.W_f.shape == (8, 16)

    def test_requires_two_bodies(self, spine3d):
        with pytest.raises(ValueError):
            ist.reduction_matrices(spine3d)


class TestAssembleRigidBody:
    def test_shapes(self, spine2d, start_positions):
        assert ist.assemble_rigid_body(spine2d, start_positions,
                                       "planar6").A_b.shape == (6, 4)
        assert ist.assemble_rigid_body(spine2d, start_positions,
                                       "collapsed").A_b.shape == (3, 4)

    def test_matches_operator_products(self, spine2d, start_positions):
        # Collapsed rows must equal K Wf A H (forces) and 1' W B A H with
        # B = [-Z X] (moment), assembled independently here.
        nodal = ist.assemble_nodal(spine2d, start_positions)
        red = ist.reduction_matrices(spine2d)
        x, z = start_positions[:, 0], start_positions[:, 1]
        B = np.hstack([-np.diag(z), np.diag(x)])
        A_f = red.K @ red.W_f @ nodal.A @ red.H
        p_f = red.K @ red.W_f @ nodal.p
        A_m = np.ones(4) @ red.W @ B @ nodal.A @ red.H
        p_m = np.ones(4) @ red.W @ B @ nodal.p
        eq = ist.assemble_rigid_body(spine2d, start_positions, "collapsed")
        assert np.allclose(eq.A_b, np.vstack([A_f, A_m]))
        assert np.allclose(eq.p_b, np.concatenate([p_f, [p_m]]))

    def test_planar6_embeds_collapsed(self, spine2d, start_positions):
        eq3 = ist.assemble_rigid_body(spine2d, start_positions, "collapsed")
        eq6 = ist.assemble_rigid_body(spine2d, start_positions, "planar6")
        assert np.allclose(eq6.A_b[[0, 2, 4]], eq3.A_b)  # Fx, Fz, My rows
        assert np.allclose(eq6.A_b[[1, 3, 5]], 0.0)      # out-of-plane rows
        assert np.allclose(eq6.p_b[[0, 2, 4]], eq3.p_b)
        assert np.allclose(eq6.p_b[[1, 3, 5]], 0.0)

    def test_unit_force_moment_identity(self):
        # A unit +x force at (x, z) = (0, 1) has moment -z*Fx + x*Fz = -1.
        x, z = 0.0, 1.0
        fx, fz = 1.0, 0.0
        assert -z * fx + x * fz == -1.0

    def test_weight_rhs(self, spine2d, start_positions):
        eq = ist.assemble_rigid_body(spine2d, start_positions, "collapsed")
        assert eq.p_b[0] == pytest.approx(0.0)
        assert eq.p_b[1] == pytest.approx(-0.13 * 9.81)
        assert eq.p_b[1] == pytest.approx(-1.27530, abs=1e-5)
        assert eq.p_b[2] == pytest.approx(0.0, abs=1e-15)  # symmetric pose

    def test_rank_three_both_stackings(self, spine2d, start_positions):
        for stacking in ("collapsed", "planar6"):
            eq = ist.assemble_rigid_body(spine2d, start_positions, stacking)
            rank, _ = numopt.numeric_rank(eq.A_b, 1e-10)
            assert rank == 3

    def test_stacking_name_checked(self, spine2d, start_positions):
        with pytest.raises(ValueError):
            ist.assemble_rigid_body(spine2d, start_positions, "pernode")


class TestSolveMinNormTensions:
    def test_symmetry_and_kkt_oracle(self, spine2d, start_positions):
        eq = ist.assemble_rigid_body(spine2d, start_positions, "planar6")
        dens = ist.solve_min_norm_tensions(eq, 0.5)
        q = dens.q_s
        assert q[0] == pytest.approx(q[1], abs=1e-9)
        assert q[2] == pytest.approx(q[3], abs=1e-9)
        assert np.all(q >= 0.5 - 1e-9)
        # The active bounds plus the rank-3 balance pin the solution to a
        # single point; recover it independently by least squares.
        active = np.flatnonzero(q <= 0.5 + 1e-6)
        assert active.size > 0
        G = np.vstack([eq.A_b, np.eye(4)[active]])
        h = np.concatenate([eq.p_b, np.full(active.size, 0.5)])
        q_oracle, *_ = np.linalg.lstsq(G, h, rcond=None)
        assert np.max(np.abs(G @ q_oracle - h)) <= 1e-10  # consistent system
        assert q == pytest.approx(q_oracle, abs=1e-8)

    def test_equality_residual(self, spine2d, start_positions):
        eq = ist.assemble_rigid_body(spine2d, start_positions, "planar6")
        dens = ist.solve_min_norm_tensions(eq)
        assert np.max(np.abs(eq.A_b @ dens.q_s - eq.p_b)) <= 1e-7

    def test_minimality_within_null_space(self, spine2d, start_positions):
        eq = ist.assemble_rigid_body(spine2d, start_positions, "planar6")
        dens = ist.solve_min_norm_tensions(eq, 0.5)
        _, _, vt = np.linalg.svd(eq.A_b)
        null = vt[-1]
        rng = np.random.default_rng(5)
        for _ in range(50):
            cand = dens.q_s + rng.uniform(-5, 5) * null
            if np.all(cand >= dens.c_min - 1e-12):
                assert np.dot(cand, cand) >= np.dot(dens.q_s, dens.q_s) - 1e-9

    def test_constructed_infeasible(self, spine2d):
        # Far-sideways low pose: gravity's moment about the origin cannot be
        # balanced by any nonnegative tensions.
        positions = node_positions(spine2d, [Pose([-0.3, 0.02], [0.0])])
        eq = ist.assemble_rigid_body(spine2d, positions, "planar6")
        with pytest.raises(ist.InfeasiblePoseError):
            ist.solve_min_norm_tensions(eq, 0.5)

    def test_negative_bound_rejected(self, spine2d, start_positions):
        eq = ist.assemble_rigid_body(spine2d, start_positions)
        with pytest.raises(ValueError):
            ist.solve_min_norm_tensions(eq, -1.0)

    def test_scaling_covariance(self, spine2d, start_positions):
        # Doubling gravity doubles the right-hand side; with bounds
        # inactive, the equality-constrained minimum-norm solution doubles.
        eq = ist.assemble_rigid_body(spine2d, start_positions, "collapsed")
        d1 = ist.solve_min_norm_tensions(eq, 0.0)
        double = ist.RigidBodyEquilibrium(eq.A_b, 2.0 * eq.p_b, "collapsed")
        d2 = ist.solve_min_norm_tensions(double, 0.0)
        assert d2.q_s == pytest.approx(2.0 * d1.q_s, abs=1e-7)


class TestRestLengths:
    def test_direct_substitution(self):
        # l = 0.1 m, q = 200 N/m, k = 2000 N/m -> u = 0.09 m.
        assert 0.1 - 0.1 * 200.0 / 2000.0 == pytest.approx(0.09)

    def test_model_path(self, spine2d, start_positions):
        q = np.array([200.0, 200.0, 200.0, 200.0])
        u = ist.rest_lengths_from_densities(spine2d, start_positions, q)
        _, lengths = cable_vectors(spine2d, start_positions)
        assert u == pytest.approx(lengths * 0.9)

    def test_zero_density_keeps_length(self, spine2d, start_positions):
        u = ist.rest_lengths_from_densities(spine2d, start_positions, np.zeros(4))
        _, lengths = cable_vectors(spine2d, start_positions)
        assert u == pytest.approx(lengths)

    def test_density_equal_stiffness_gives_zero(self, spine2d, start_positions):
        u = ist.rest_lengths_from_densities(spine2d, start_positions,
                                            np.full(4, 2000.0))
        assert u == pytest.approx(np.zeros(4), abs=1e-15)

    def test_excess_density_rejected(self, spine2d, start_positions):
        with pytest.raises(ist.NegativeRestLengthError):
            ist.rest_lengths_from_densities(spine2d, start_positions,
                                            np.full(4, 2500.0))

    def test_negative_density_rejected(self, spine2d, start_positions):
        with pytest.raises(ValueError):
            ist.rest_lengths_from_densities(spine2d, start_positions,
                                            np.array([-1.0, 0, 0, 0]))


@pytest.fixture(scope="module")
def short_sweep(spine2d):
    spec = trj.default_sweep(spine2d, duration=3.0, dt=1e-2)
    return trj.build_trajectory(spec, spine2d)


class TestGenerateInputTrajectory:
    def test_outputs_and_tension_floor(self, spine2d, short_sweep):
        times, states = short_sweep
        traj = ist.generate_input_trajectory(spine2d, times, states)
        assert len(traj) == len(times)
        for xi, u in zip(states[::25], traj.u[::25]):
            _, lengths, _, tensions = dyn.cable_state(spine2d, xi, u)
            assert np.all(tensions >= 0.5 * lengths * (1 - 1e-9))
            assert np.all(tensions > 0)

    def test_equilibrium_audit(self, spine2d, short_sweep):
        times, states = short_sweep
        traj = ist.generate_input_trajectory(spine2d, times, states)
        worst = max(np.max(np.abs(dyn.accelerations(spine2d, xi, u)))
                    for xi, u in zip(states, traj.u))
        assert worst <= 1e-6

    def test_continuity_on_fine_grid(self, spine2d):
        spec = trj.default_sweep(spine2d, duration=0.25, dt=1e-3)
        times, states = trj.build_trajectory(spec, spine2d)
        traj = ist.generate_input_trajectory(spine2d, times, states)
        assert np.max(np.abs(np.diff(traj.u, axis=0))) <= 1e-3

    def test_rank_and_null_space_along_sweep(self, spine2d, short_sweep):
        _, states = short_sweep
        for xi in states[::10]:
            positions = node_positions(spine2d, spine2d.poses_from_state(xi))
            eq = ist.assemble_rigid_body(spine2d, positions, "planar6")
            rank, sv = numopt.numeric_rank(eq.A_b, 1e-10)
            assert rank == 3
            assert sv[3] / sv[0] <= 1e-10

    def test_wrench_balance_about_both_points(self, spine2d, short_sweep):
        # Tensions reinserted as forces must produce zero net force and zero
        # net moment about the origin AND about the COM.
        times, states = short_sweep
        traj = ist.generate_input_trajectory(spine2d, times, states)
        for xi, q in zip(states[::30], traj.q[::30]):
            positions = node_positions(spine2d, spine2d.poses_from_state(xi))
            C_s = spine2d.cables_matrix
            vecs = C_s @ positions
            forces_nodes = -C_s.T @ (q[:, None] * vecs)  # per-node cable force
            moving = slice(4, 8)
            g_force = np.array([0.0, -0.0325 * 9.81])
            net = forces_nodes[moving].sum(axis=0) + 4 * g_force
            assert np.max(np.abs(net)) <= 1e-7
            for ref in (np.zeros(2), xi[:2]):
                arms = positions[moving] - ref
                m_cables = np.sum(-arms[:, 1] * forces_nodes[moving][:, 0]
                                  + arms[:, 0] * forces_nodes[moving][:, 1])
                m_gravity = np.sum(-arms[:, 1] * 0.0 + arms[:, 0] * g_force[1])
                assert abs(m_cables + m_gravity) <= 1e-7

    def test_infeasible_pose_reports_index(self, spine2d):
        # A pose far sideways and low cannot be held: gravity's moment about
        # the origin exceeds what nonnegative cable tensions can produce.
        good = np.array([0.0, 0.1, 0.0, 0.0, 0.0, 0.0])
        bad = np.array([-0.3, 0.02, 0.0, 0.0, 0.0, 0.0])
        with pytest.raises(ist.InfeasiblePoseError) as err:
            ist.generate_input_trajectory(spine2d, np.array([0.0, 1.0]),
                                          np.vstack([good, bad]))
        assert err.value.index == 1

    def test_csv_export(self, tmp_path, spine2d):
        spec = trj.default_sweep(spine2d, duration=0.1, dt=0.05)
        times, states = trj.build_trajectory(spec, spine2d)
        traj = ist.generate_input_trajectory(spine2d, times, states)
        path = tmp_path / "inputs.csv"
        traj.to_csv(path, ["hello"])
        lines = path.read_text().splitlines()
        assert lines[0] == "# hello"
        cols = lines[1].split(",")
        assert cols == (["t"] + [f"u_{i}" for i in range(1, 5)]
                        + [f"q_{i}" for i in range(1, 5)] + ["eq_residual"])
        assert len(lines) == 2 + 3


class TestSpatialExtension:
    def test_3d_assembly_solves_and_holds_equilibrium(self, spine3d):
        # The per-body balance generalizes to the spatial chain: three
        # moving bodies give 18 rows over 24 cable densities, and the
        # back-calculated rest lengths hold the full nonlinear model still.
        spec = trj.default_sweep(spine3d)
        for t in (0.0, 3.0):
            xi = trj.state_at(spec, spine3d, t)
            positions = node_positions(spine3d, spine3d.poses_from_state(xi))
            eq = ist.assemble_rigid_body(spine3d, positions)
            assert eq.A_b.shape == (18, 24)
            assert numopt.numeric_rank(eq.A_b, 1e-10)[0] == 18
            dens = ist.solve_min_norm_tensions(eq, 0.5)
            u = ist.rest_lengths_from_densities(spine3d, positions, dens.q_s)
            acc = np.max(np.abs(dyn.accelerations(spine3d, xi, u)))
            assert acc <= 1e-6


class TestNodalFailure:
    def test_least_squares_residual_large(self, spine2d):
        spec = trj.default_sweep(spine2d, duration=1.0, dt=0.25)
        _, states = trj.build_trajectory(spec, spine2d)
        residuals = []
        for xi in states:
            positions = node_positions(spine2d, spine2d.poses_from_state(xi))
            residuals.append(ist.nodal_least_squares_residual(spine2d, positions))
        assert max(residuals) > 0.1
