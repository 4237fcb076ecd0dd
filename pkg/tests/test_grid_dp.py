"""
Tests for grid dynamic programming: interpolation, the Bellman operator,
value iteration, rollouts and the exhaustive oracle.
"""
import numpy as np
import pytest


def _setting(system, beta, state_nodes, control_nodes):
    from core.grid_dp import Grid
    from core.model import DiscountedProblem
    return (
        DiscountedProblem(system, beta),
        Grid.uniform(system.state_box, state_nodes),
        Grid.uniform(system.control_box, control_nodes),
    )


class TestGrid:
    """Test rectilinear grids."""

    def test_uniform_nodes_in_c_order(self):
        """Nodes enumerate the last axis fastest."""
        from core.grid_dp import Grid
        from core.model import Box
        grid = Grid.uniform(Box.from_intervals([(0.0, 1.0), (0.0, 2.0)]), [2, 3])
        assert grid.shape == (2, 3)
        np.testing.assert_allclose(grid.nodes[:3], [[0.0, 0.0], [0.0, 1.0], [0.0, 2.0]])
        np.testing.assert_allclose(grid.spacing, [1.0, 1.0])

    def test_nearest_index_ties_to_lower(self):
        """A point half way between nodes maps to the lower one."""
        from core.grid_dp import Grid
        grid = Grid((np.array([0.0, 1.0, 2.0]),))
        assert grid.nearest_index([[0.5], [1.6], [9.0]]).tolist() == [0, 2, 2]

    def test_neighbors(self):
        """Corner nodes have one neighbour per axis."""
        from core.grid_dp import Grid
        grid = Grid((np.arange(3.0), np.arange(4.0)))
        assert sorted(grid.neighbors(0)) == [1, 4]
        assert len(grid.neighbors(5)) == 4

    def test_axis_validation(self):
        """Axes must be strictly increasing with at least two nodes."""
        from core.errors import DomainError
        from core.grid_dp import Grid
        with pytest.raises(DomainError):
            Grid((np.array([0.0, 0.0, 1.0]),))
        with pytest.raises(DomainError):
            Grid((np.array([0.0]),))


class TestInterpolation:
    """Test multilinear interpolation."""

    def test_exact_on_multilinear_functions(self, rng):
        """f(x, y) = 1 + 2x - y + 3xy is reproduced exactly."""
        from core.interpolation import interpolate
        axes = (np.linspace(-1.0, 1.0, 5), np.linspace(0.0, 2.0, 4))
        mesh = np.meshgrid(*axes, indexing="ij")
        values = (1 + 2 * mesh[0] - mesh[1] + 3 * mesh[0] * mesh[1]).ravel()
        pts = np.column_stack([rng.uniform(-1, 1, 40), rng.uniform(0, 2, 40)])
        expected = 1 + 2 * pts[:, 0] - pts[:, 1] + 3 * pts[:, 0] * pts[:, 1]
        np.testing.assert_allclose(interpolate(axes, values, pts), expected, atol=1e-12)

    def test_weights_form_partition_of_unity(self, rng):
        """Weights lie in [0, 1] and sum to one, also for clipped points."""
        from core.interpolation import cell_weights
        axes = (np.linspace(0.0, 1.0, 7), np.linspace(-2.0, 2.0, 3))
        pts = rng.uniform(-3.0, 3.0, size=(30, 2))
        _, weights = cell_weights(axes, pts)
        assert np.all(weights >= 0) and np.all(weights <= 1)
        np.testing.assert_allclose(weights.sum(axis=1), 1.0)

    def test_transition_matrix_matches_interpolate(self, rng):
        """W @ values equals interpolate at every point."""
        from core.interpolation import interpolate, transition_matrix
        axes = (np.linspace(-1.0, 1.0, 9),)
        values = rng.normal(size=9)
        pts = rng.uniform(-1.0, 1.0, size=(12, 1))
        W = transition_matrix(axes, pts)
        np.testing.assert_allclose(W @ values, interpolate(axes, values, pts))


class TestBellmanOperator:
    """Test the discrete Bellman operator."""

    def test_contraction(self, example1, rng):
        """|T V - T W| <= beta |V - W| in the sup norm."""
        from core.grid_dp import BellmanOperator
        problem, grid, cgrid = _setting(example1, 0.6, 41, 31)
        op = BellmanOperator(problem, grid, cgrid)
        for _ in range(100):
            V = rng.normal(size=grid.size)
            W = rng.normal(size=grid.size)
            lhs = np.max(np.abs(op.apply(V) - op.apply(W)))
            assert lhs <= 0.6 * np.max(np.abs(V - W)) + 1e-12

    def test_monotone(self, example3, rng):
        """V <= W nodewise gives T V <= T W nodewise."""
        from core.grid_dp import BellmanOperator
        problem, grid, cgrid = _setting(example3, 0.7, 41, 31)
        op = BellmanOperator(problem, grid, cgrid)
        for _ in range(100):
            V = rng.normal(size=grid.size)
            W = V + rng.exponential(size=grid.size)
            assert np.all(op.apply(V) <= op.apply(W) + 1e-12)

    def test_narrow_grid_warns(self, example1, caplog):
        """A state grid smaller than the state box is flagged before successors get clipped."""
        import logging
        from core.grid_dp import BellmanOperator, Grid
        from core.model import Box
        problem, _, cgrid = _setting(example1, 0.6, 21, 11)
        narrow = Grid.uniform(Box.from_intervals([(-1.0, 1.0)]), 21)
        with caplog.at_level(logging.WARNING, logger="core.grid_dp"):
            BellmanOperator(problem, narrow, cgrid)
        assert any("does not cover the state box" in r.getMessage() for r in caplog.records)
        caplog.clear()
        with caplog.at_level(logging.WARNING, logger="core.grid_dp"):
            BellmanOperator(*_setting(example1, 0.6, 21, 11))
        assert not caplog.records

    def test_infeasible_nodes(self):
        """Nodes without an admissible control are reported, not silently dropped."""
        from core.errors import InfeasibleNodeError
        from core.grid_dp import BellmanOperator
        from core.model import expand_model_spec
        from core.schemas import ModelKind, ModelSpec
        system = expand_model_spec(ModelSpec(kind=ModelKind.EXAMPLE_3, control_box=[(-0.5, 0.5)]))
        problem, grid, cgrid = _setting(system, 0.7, 21, 11)
        with pytest.raises(InfeasibleNodeError) as info:
            BellmanOperator(problem, grid, cgrid)
        assert [1.0] in info.value.nodes

    def test_control_grid_inside_box(self, example1):
        """A control grid reaching past the control box is rejected."""
        from core.errors import DomainError
        from core.grid_dp import BellmanOperator, Grid
        from core.model import Box
        problem, grid, _ = _setting(example1, 0.6, 21, 11)
        wide = Grid.uniform(Box.from_intervals([(-1.0, 1.0)]), 11)
        with pytest.raises(DomainError):
            BellmanOperator(problem, grid, wide)


class TestValueIteration:
    """Test value iteration and policy extraction."""

    def test_residual_within_tolerance(self, example1):
        """The returned iterate is a near fixed point of T."""
        from core.grid_dp import BellmanOperator, value_iteration
        problem, grid, cgrid = _setting(example1, 0.6, 81, 61)
        op = BellmanOperator(problem, grid, cgrid)
        V = value_iteration(problem, grid, cgrid, tol=1e-8, operator=op)
        assert V.bellman_residual <= 1e-8
        assert V.iterations > 1
        assert np.max(np.abs(op.apply(V.values) - V.values)) <= 2e-8

    def test_worker_count_does_not_change_result(self, example1):
        """Jacobi sweeps give the same values for one or several workers."""
        from core.grid_dp import value_iteration
        problem, grid, cgrid = _setting(example1, 0.7, 61, 41)
        serial = value_iteration(problem, grid, cgrid, tol=1e-7)
        threaded = value_iteration(problem, grid, cgrid, tol=1e-7, workers=3)
        assert serial.iterations == threaded.iterations
        np.testing.assert_allclose(serial.values, threaded.values, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("constant,expected", [(1.0, 2.0), (0.0, 0.0)])
    def test_constant_cost(self, constant, expected):
        """l = c at beta = 0.5 gives V = c / (1 - beta) at every node."""
        from core.grid_dp import value_iteration
        from core.model import expand_model_spec
        from core.schemas import ModelKind, ModelSpec
        system = expand_model_spec(ModelSpec(
            kind=ModelKind.POLYNOMIAL,
            f_coeffs=[[{"c": 1.0, "x": [1]}, {"c": 1.0, "u": [1]}]],
            l_coeffs=[{"c": constant}] if constant else [],
            state_box=[(-1.0, 1.0)],
            control_box=[(-0.5, 0.5)],
        ))
        problem, grid, cgrid = _setting(system, 0.5, 21, 11)
        V = value_iteration(problem, grid, cgrid, tol=1e-10)
        np.testing.assert_allclose(V.values, expected, atol=1e-9)

    def test_rotated_and_original_policies_coincide(self, example3):
        """Greedy controls of l and of l~ agree wherever the argmin is unique by a clear margin."""
        from core.grid_dp import BellmanOperator, value_iteration
        from core.model import CostSpec, Equilibrium, StorageFunction
        problem, grid, cgrid = _setting(example3, 0.7, 201, 61)
        eq = Equilibrium.at(example3, [0.0], [0.0], 0.7)
        storage = StorageFunction.quadratic([-1.0], eq.x, example3.state_box)
        original = BellmanOperator(problem, grid, cgrid)
        rotated = BellmanOperator(problem, grid, cgrid, cost=CostSpec.rotated(eq, storage))
        V = value_iteration(problem, grid, cgrid, tol=1e-9, operator=original)
        V_rot = value_iteration(problem, grid, cgrid, tol=1e-9, operator=rotated)
        q = original.q_values(V.values)
        q_rot = rotated.q_values(V_rot.values)

        def runner_up_gap(table):
            two = np.sort(table, axis=1)[:, :2]
            return two[:, 1] - two[:, 0]

        unique = (runner_up_gap(q) > 1e-3) & (runner_up_gap(q_rot) > 1e-3)
        assert unique.mean() >= 0.5
        agree = np.argmin(q, axis=1) == np.argmin(q_rot, axis=1)
        assert agree[unique].mean() >= 0.95

    def test_non_convergence(self, example1):
        """An exhausted iteration budget raises with the last residual."""
        from core.errors import NonConvergenceError
        from core.grid_dp import value_iteration
        problem, grid, cgrid = _setting(example1, 0.9, 21, 11)
        with pytest.raises(NonConvergenceError) as info:
            value_iteration(problem, grid, cgrid, tol=1e-10, max_iter=2)
        assert info.value.iterations == 2

    def test_policy_attains_minimum(self, example1):
        """Greedy controls achieve T V at every node."""
        from core.grid_dp import BellmanOperator, extract_policy, value_iteration
        problem, grid, cgrid = _setting(example1, 0.6, 41, 31)
        op = BellmanOperator(problem, grid, cgrid)
        V = value_iteration(problem, grid, cgrid, tol=1e-8, operator=op)
        policy = extract_policy(V, problem, cgrid, operator=op)
        q = op.q_values(V.values)
        chosen = q[np.arange(grid.size), policy.control_indices]
        np.testing.assert_allclose(chosen, q.min(axis=1))

    def test_csv_round_trip(self, example1, tmp_path):
        """A value table written to CSV reads back with the same nodes and values."""
        from core.grid_dp import GriddedValueFunction, value_iteration
        problem, grid, cgrid = _setting(example1, 0.6, 21, 11)
        V = value_iteration(problem, grid, cgrid, tol=1e-6)
        path = V.write_csv(tmp_path / "V.csv")
        back = GriddedValueFunction.read_csv(path, beta=0.6)
        np.testing.assert_array_equal(back.grid.nodes, grid.nodes)
        np.testing.assert_array_equal(back.values, V.values)


class TestRollout:
    """Test closed-loop and open-loop simulation."""

    def test_closed_loop_is_admissible(self, example1):
        """Every step of a rollout satisfies the constraints and the dynamics."""
        from core.grid_dp import extract_policy, rollout, value_iteration
        from core.schemas import RolloutMode
        problem, grid, cgrid = _setting(example1, 0.6, 81, 61)
        V = value_iteration(problem, grid, cgrid, tol=1e-6)
        policy = extract_policy(V, problem, cgrid)
        for mode in RolloutMode:
            traj = rollout(policy, problem, [-0.8], 20, mode=mode)
            assert traj.N == 20 and not traj.exited
            assert np.all(example1.admissible(traj.states[:-1], traj.controls))
            np.testing.assert_allclose(traj.states[1:], traj.states[:-1] + traj.controls)

    def test_discounted_partial_sums(self, example3):
        """discounted_sums[k] accumulates beta^j l(x(j), u(j)) for j < k."""
        from core.grid_dp import evaluate_open_loop
        from core.model import DiscountedProblem
        problem = DiscountedProblem(example3, 0.5)
        traj = evaluate_open_loop(problem, [0.25], [[0.0], [-0.5], [0.0]])
        np.testing.assert_allclose(traj.states.ravel(), [0.25, 0.5, 0.5, 1.0])
        costs = [-0.25 ** 2 / 2, -0.5 ** 2 / 2 + 0.25, -0.5 ** 2 / 2]
        expected = np.cumsum([0.0] + [0.5 ** j * c for j, c in enumerate(costs)])
        np.testing.assert_allclose(traj.discounted_sums, expected)
        assert traj.cost == pytest.approx(expected[-1])

    def test_rotated_objective_telescopes(self, example3, rng):
        """sum beta^k l~ = sum beta^k (l - l_eq) + lambda(x0) - beta^N lambda(x_N), exact to 1e-10."""
        from core.grid_dp import evaluate_open_loop
        from core.model import CostSpec, DiscountedProblem, Equilibrium, StorageFunction
        for beta in (0.6, 0.7, 0.9):
            problem = DiscountedProblem(example3, beta)
            eq = Equilibrium.at(example3, [0.0], [0.0], beta)
            storage = StorageFunction.quadratic([-1.0], eq.x, example3.state_box)
            for _ in range(20):
                x0 = rng.uniform(-1.0, 1.0)
                x, controls = x0, []
                for _ in range(int(rng.integers(1, 8))):
                    lo, hi = max(-3.0, -1.0 - 2 * x), min(3.0, 1.0 - 2 * x)
                    u = rng.uniform(lo + 1e-9, hi - 1e-9)
                    controls.append([u])
                    x = 2 * x + u
                controls.append([-2 * x])
                controls.extend([[0.0]] * 3)
                traj = evaluate_open_loop(problem, [x0], controls, cost=CostSpec.rotated(eq, storage))
                N = traj.N
                expected = (traj.cost - eq.stage_cost_value * (1 - beta ** N) / (1 - beta)
                            + float(storage([x0])) - beta ** N * float(storage(traj.terminal)))
                assert traj.rotated_cost == pytest.approx(expected, abs=1e-10)
                assert abs(traj.terminal[0]) <= 1e-9
                assert traj.rotated_cost == pytest.approx(traj.cost - x0 ** 2, abs=1e-8)

    def test_open_loop_inadmissible_step(self, example1):
        """The first step leaving X is reported by index."""
        from core.errors import InadmissibleControlError
        from core.grid_dp import evaluate_open_loop
        from core.model import DiscountedProblem
        problem = DiscountedProblem(example1, 0.6)
        with pytest.raises(InadmissibleControlError) as info:
            evaluate_open_loop(problem, [1.5], [[0.4], [0.4]])
        assert info.value.step == 1

    def test_initial_state_outside_box(self, example1):
        """Rollouts must start inside the state box."""
        from core.errors import DomainError
        from core.grid_dp import extract_policy, rollout, value_iteration
        problem, grid, cgrid = _setting(example1, 0.6, 21, 11)
        policy = extract_policy(value_iteration(problem, grid, cgrid), problem, cgrid)
        with pytest.raises(DomainError):
            rollout(policy, problem, [2.5], 5)


class TestBruteForce:
    """Test the exhaustive finite-horizon oracle."""

    def test_enclosure_contains_grid_value(self, example3):
        """On a grid closed under the dynamics the DP value lies inside the enclosure."""
        from core.grid_dp import brute_force_value, value_iteration
        problem, grid, cgrid = _setting(example3, 0.5, 5, 7)
        V = value_iteration(problem, grid, cgrid, tol=1e-10)
        interval = brute_force_value(problem, [0.5], cgrid, K=6)
        assert interval.contains(float(V([[0.5]])[0]), slack=1e-8)
        assert interval.width == pytest.approx(2 * interval.tailbound)

    def test_coarse_grid_value_matches_enumeration(self, example3):
        """beta = 0.7, 21 x 7 grid, x0 = 0.2, K = 8: |V - midpoint| <= tail + modulus."""
        from core.grid_dp import brute_force_value, value_iteration
        problem, grid, cgrid = _setting(example3, 0.7, 21, 7)
        V = value_iteration(problem, grid, cgrid, tol=1e-10)
        interval = brute_force_value(problem, [0.2], cgrid, K=8)
        value = float(V([[0.2]])[0])
        assert abs(value - interval.midpoint) <= interval.tailbound + V.modulus_of_continuity()
        assert interval.contains(value, slack=V.modulus_of_continuity())

    def test_cost_bound_finds_off_grid_peak(self):
        """The peak of |l| sits between state nodes; the bound still reaches it."""
        from core.grid_dp import Grid, sup_abs_cost
        from core.model import DiscountedProblem, expand_model_spec
        from core.schemas import ModelKind, ModelSpec
        system = expand_model_spec(ModelSpec(
            kind=ModelKind.POLYNOMIAL,
            f_coeffs=[[{"c": 0.5, "x": [1]}, {"c": 1.0, "u": [1]}]],
            l_coeffs=[{"c": -1.0, "x": [2]}, {"c": 0.026, "x": [1]}, {"c": 0.999831}],
            state_box=[(-1.0, 1.0)],
            control_box=[(-0.1, 0.1)],
        ))
        problem = DiscountedProblem(system, 0.5)
        cgrid = Grid.uniform(system.control_box, 5)
        bound = sup_abs_cost(problem, cgrid)
        assert bound >= 1.0 - 1e-9
        assert bound == pytest.approx(1.0, abs=1e-9)

    def test_budget(self, example3):
        """Enumerations above the budget are refused."""
        from core.errors import BudgetExceededError
        from core.grid_dp import Grid, brute_force_value
        from core.model import DiscountedProblem
        problem = DiscountedProblem(example3, 0.5)
        cgrid = Grid.uniform(example3.control_box, 7)
        with pytest.raises(BudgetExceededError):
            brute_force_value(problem, [0.5], cgrid, K=10)
