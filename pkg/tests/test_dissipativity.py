"""
Tests for equilibria, storage synthesis, comparison-function fits and the
grid verification of discounted strict dissipativity.
"""
import math

import numpy as np
import pytest

EXAMPLE_1_EQUILIBRIA = sorted([(3 - math.sqrt(905)) / 32, 0.0, (3 + math.sqrt(905)) / 32])


def _grids(system, state_nodes, control_nodes):
    from core.grid_dp import Grid
    return Grid.uniform(system.state_box, state_nodes), Grid.uniform(system.control_box, control_nodes)


def _example_3_certificate(beta):
    from core.model import DiscountedProblem, Equilibrium, StorageFunction, expand_model_spec
    from core.schemas import ModelKind, ModelSpec
    system = expand_model_spec(ModelSpec(kind=ModelKind.EXAMPLE_3))
    eq = Equilibrium.at(system, [0.0], [0.0], beta)
    storage = StorageFunction.quadratic([-1.0], eq.x, system.state_box)
    return DiscountedProblem(system, beta), eq, storage


class TestEquilibria:
    """Test the equilibrium search."""

    def test_example_1_stationary_points(self, example1):
        """Three equilibria at u = 0, sorted by stage cost (global first)."""
        from core.dissipativity import find_equilibria
        sgrid, cgrid = _grids(example1, 201, 121)
        equilibria = find_equilibria(example1, 0.6, sgrid, cgrid)
        assert len(equilibria) == 3
        xs = sorted(float(e.x[0]) for e in equilibria)
        np.testing.assert_allclose(xs, EXAMPLE_1_EQUILIBRIA, atol=1e-3)
        assert equilibria[0].x[0] == pytest.approx(EXAMPLE_1_EQUILIBRIA[2], abs=1e-3)
        assert all(abs(e.u[0]) < 1e-6 and e.residual < 1e-8 for e in equilibria)
        costs = [e.stage_cost_value for e in equilibria]
        assert costs == sorted(costs)

    def test_local_equilibrium_selection(self, example1):
        """The cheapest non-global local minimizer is the local turnpike."""
        from core.dissipativity import find_equilibria, select_local_equilibrium
        sgrid, cgrid = _grids(example1, 201, 121)
        equilibria = find_equilibria(example1, 0.6, sgrid, cgrid)
        index = select_local_equilibrium(example1, equilibria)
        assert equilibria[index].x[0] == pytest.approx(EXAMPLE_1_EQUILIBRIA[0], abs=1e-3)
        assert select_local_equilibrium(example1, equilibria, anchor=2) == 2

    def test_anchor_out_of_range(self, example1):
        """An anchor beyond the equilibrium list is a region error."""
        from core.dissipativity import find_equilibria, select_local_equilibrium
        from core.errors import RegionError
        sgrid, cgrid = _grids(example1, 101, 61)
        equilibria = find_equilibria(example1, 0.6, sgrid, cgrid)
        with pytest.raises(RegionError):
            select_local_equilibrium(example1, equilibria, anchor=7)

    def test_example_3_origin(self, example3):
        """Example 3 has a single equilibrium at the origin."""
        from core.dissipativity import find_equilibria
        sgrid, cgrid = _grids(example3, 201, 121)
        equilibria = find_equilibria(example3, 0.7, sgrid, cgrid)
        assert len(equilibria) == 1
        np.testing.assert_allclose(equilibria[0].x, [0.0], atol=1e-6)
        np.testing.assert_allclose(equilibria[0].u, [0.0], atol=1e-6)

    def test_large_joint_grid_is_coarsened(self, example3):
        """Search grids above the candidate budget shrink uniformly."""
        from core.dissipativity import JOINT_CANDIDATE_BUDGET, _search_grids
        sgrid, cgrid = _grids(example3, 4001, 601)
        coarse_s, coarse_c = _search_grids(sgrid, cgrid)
        assert coarse_s.size * coarse_c.size <= JOINT_CANDIDATE_BUDGET
        assert coarse_s.box.intervals() == sgrid.box.intervals()

    def test_default_region(self, example1):
        """Half way to the nearest other equilibrium."""
        from core.dissipativity import default_region
        from core.model import Equilibrium
        equilibria = [Equilibrium.at(example1, [x], [0.0], 0.6) for x in (1.0, -0.8, 0.0)]
        region = default_region(example1, equilibria, 1)
        np.testing.assert_allclose(region.lower, [-1.2])
        np.testing.assert_allclose(region.upper, [-0.4])


class TestStorageSynthesis:
    """Test linear storage synthesis."""

    def test_example_1_zero_multiplier(self, example1):
        """A u-independent cost stationary at x_l gives nu = 0."""
        from core.dissipativity import synthesize_linear_storage
        from core.model import Equilibrium
        eq = Equilibrium.at(example1, [EXAMPLE_1_EQUILIBRIA[0]], [0.0], 0.6)
        storage = synthesize_linear_storage(example1, eq, 0.6)
        assert abs(storage.coefficients[0]) < 1e-6
        assert storage.synthesis_residual < 1e-6

    def test_non_stationary_state(self, example1):
        """Away from a stationary point no linear storage exists."""
        from core.dissipativity import synthesize_linear_storage
        from core.errors import StorageSynthesisError
        from core.model import Equilibrium
        eq = Equilibrium.at(example1, [-0.5], [0.0], 0.6)
        with pytest.raises(StorageSynthesisError):
            synthesize_linear_storage(example1, eq, 0.6)


class TestComparisonFits:
    """Test the piecewise-linear comparison-function fits."""

    def test_lower_fit_below_samples(self, rng):
        """alpha(r) <= v for every sample and alpha is class K."""
        from core.dissipativity import fit_comparison_lower
        r = rng.uniform(0.01, 1.0, 200)
        v = r ** 2 + rng.uniform(0.0, 0.1, 200)
        alpha = fit_comparison_lower(r, v)
        assert np.all(alpha(r) <= v + 1e-12)
        assert alpha(0.0) == 0.0
        assert np.all(np.diff(alpha.values) > 0)

    def test_upper_fit_above_samples(self, rng):
        """gamma(r) >= v for every sample."""
        from core.dissipativity import fit_comparison_upper
        r = rng.uniform(0.01, 1.0, 200)
        v = np.sqrt(r) * rng.uniform(0.5, 1.0, 200)
        gamma = fit_comparison_upper(r, v)
        assert np.all(gamma(r) >= v - 1e-12)

    def test_lower_fit_rejects_zero_away_from_origin(self):
        """A zero sample at positive deviation is not positive definite."""
        from core.dissipativity import fit_comparison_lower
        from core.errors import NotPositiveDefiniteError
        with pytest.raises(NotPositiveDefiniteError):
            fit_comparison_lower([0.1, 0.5, 1.0], [0.2, 0.0, 0.4])
        with pytest.raises(NotPositiveDefiniteError):
            fit_comparison_lower([0.1, 0.5], [0.2, -0.1])

    def test_lower_fit_merges_rounding_neighbours(self):
        """Deviations one ulp apart share a level and alpha stays below each sample."""
        from core.dissipativity import fit_comparison_lower
        r = np.array([1.0, 3.5499999999999994, 3.55, 3.5500000000000003, 5.0])
        v = np.array([0.5, 5.2142, 5.2142, 5.3919, 6.0])
        alpha = fit_comparison_lower(r, v)
        assert np.all(alpha(r) <= v + 1e-10)
        assert sum(abs(b - 3.55) < 1e-9 for b in alpha.breakpoints) == 1

    def test_tied_breakpoint_moves_outward(self):
        """A value tie keeps the larger deviation so the next segment cannot overshoot."""
        from core.dissipativity import _strict_breakpoints
        alpha = _strict_breakpoints(np.array([1.0, 2.0, 3.0, 4.0]), np.array([1.0, 2.0, 2.0, 5.0]))
        assert alpha.breakpoints == [0.0, 1.0, 3.0, 4.0]
        assert alpha(3.0) <= 2.0


class TestVerification:
    """Test the grid certificate of discounted strict dissipativity."""

    def test_example_1_local_certificate(self, example1):
        """lambda = 0 certifies x-dissipativity on [-1.2, -0.5] but inf l~ is negative."""
        from core.dissipativity import verify_dissipativity
        from core.model import Box, DiscountedProblem, Equilibrium, StorageFunction
        from core.schemas import DissipativityVariant
        problem = DiscountedProblem(example1, 0.6)
        eq = Equilibrium.at(example1, [EXAMPLE_1_EQUILIBRIA[0]], [0.0], 0.6)
        report = verify_dissipativity(
            problem, eq, StorageFunction.zero(eq.x), Box.from_intervals([(-1.2, -0.5)]),
            variant=DissipativityVariant.X_ONLY, state_nodes=101, control_nodes=61,
        )
        assert report.accepted
        assert report.margin >= -1e-10
        assert report.ell_tilde_min == pytest.approx(-0.4154, abs=5e-3)
        assert report.alpha_fit is not None

    def test_example_1_wide_region_rejected(self, example1):
        """A region reaching the global equilibrium contains negative rotated costs."""
        from core.dissipativity import verify_dissipativity
        from core.model import Box, DiscountedProblem, Equilibrium, StorageFunction
        from core.schemas import DissipativityVariant
        problem = DiscountedProblem(example1, 0.6)
        eq = Equilibrium.at(example1, [EXAMPLE_1_EQUILIBRIA[0]], [0.0], 0.6)
        report = verify_dissipativity(
            problem, eq, StorageFunction.zero(eq.x), Box.from_intervals([(-1.2, 1.2)]),
            variant=DissipativityVariant.X_ONLY, state_nodes=101, control_nodes=61,
        )
        assert not report.accepted
        assert report.violation_count > 0
        assert report.margin < 0
        assert len(report.violations) <= 50

    def test_example_3_flip(self):
        """lambda = -x^2 fails at beta = 0.600 and holds at beta = 0.605."""
        from core.dissipativity import verify_dissipativity
        from core.model import Box
        region = Box.from_intervals([(-1.0, 1.0)])
        problem, eq, storage = _example_3_certificate(0.6)
        assert not verify_dissipativity(problem, eq, storage, region).accepted
        problem, eq, storage = _example_3_certificate(0.605)
        report = verify_dissipativity(problem, eq, storage, region)
        assert report.accepted
        assert report.positivity_margin > 0

    @pytest.mark.parametrize("beta", [0.605, 0.7])
    def test_example_3_margin_over_whole_grid(self, beta):
        """Accepted (x, u) certificates keep l~ >= alpha on every admissible pair, near ties included."""
        from core.dissipativity import _pair_deviation, snap_deviations, verify_dissipativity
        from core.grid_dp import Grid
        from core.model import Box, rotated_cost_values
        from core.schemas import DissipativityVariant
        region = Box.from_intervals([(-1.0, 1.0)])
        problem, eq, storage = _example_3_certificate(beta)
        report = verify_dissipativity(problem, eq, storage, region)
        assert report.accepted
        assert not report.margin_excludes_cell
        assert report.margin >= -1e-10

        sgrid = Grid.uniform(region, 201)
        cgrid = Grid.uniform(problem.system.control_box, 201)
        x, u = sgrid.nodes[:, None, :], cgrid.nodes[None, :, :]
        adm = problem.system.admissible(x, u)
        ell = np.broadcast_to(rotated_cost_values(problem, eq, storage, x, u), adm.shape)[adm]
        dev = snap_deviations(np.broadcast_to(
            _pair_deviation(x, u, eq, DissipativityVariant.XU), adm.shape))[adm]
        assert np.min(ell - report.alpha_fit(dev)) >= -1e-10

    def test_example_3_sum_of_squares(self, rng):
        """At beta = 0.6 the rotated cost is 1.6 (u + 0.75 x)^2."""
        from core.model import rotated_cost_values
        problem, eq, storage = _example_3_certificate(0.6)
        x = rng.uniform(-0.4, 0.4, size=(50, 1))
        u = rng.uniform(-0.2, 0.2, size=(50, 1))
        expected = 1.6 * (u[:, 0] + 0.75 * x[:, 0]) ** 2
        np.testing.assert_allclose(rotated_cost_values(problem, eq, storage, x, u), expected, atol=1e-12)

    def test_region_outside_state_box(self, example3):
        """Regions must lie inside X."""
        from core.dissipativity import verify_dissipativity
        from core.errors import RegionError
        from core.model import Box
        problem, eq, storage = _example_3_certificate(0.7)
        with pytest.raises(RegionError):
            verify_dissipativity(problem, eq, storage, Box.from_intervals([(-2.0, 2.0)]))
