"""
Desk-scale reproduction of the three example problems on their preset grids.

These solve full-resolution value iterations and take minutes; run them with
`pytest -m slow`.
"""
import math

import numpy as np
import pytest

pytestmark = pytest.mark.slow

X_LOCAL = (3 - math.sqrt(905)) / 32
X_GLOBAL = (3 + math.sqrt(905)) / 32


def _preset(example, **fields):
    from core.schemas import RunConfig
    from data.examples import resolve_config
    return resolve_config(RunConfig(example=example, **fields))


def _closed_loop(config, beta, x0, horizon=30):
    from core.dissipativity import find_equilibria
    from core.grid_dp import extract_policy, rollout, value_iteration
    from core.orchestrator import build_setting
    from core.turnpike import classify_terminal, minimizing_equilibria
    setting = build_setting(config, beta)
    V = value_iteration(setting.problem, setting.state_grid, setting.control_grid, tol=config.tol)
    policy = extract_policy(V, setting.problem, setting.control_grid)
    traj = rollout(policy, setting.problem, [x0], horizon)
    equilibria = find_equilibria(setting.system, beta, setting.state_grid, setting.control_grid)
    targets = minimizing_equilibria(setting.system, equilibria)
    label, _, steps = classify_terminal(traj.states, equilibria, setting.system.state_box, targets=targets)
    return traj, label, steps


class TestExample1:
    """x+ = x + u with the double-well cost."""

    def test_equilibria_and_storage(self):
        """Both wells within 1e-3 and a zero linear storage at x_l."""
        from core.dissipativity import find_equilibria, select_local_equilibrium, synthesize_linear_storage
        from core.orchestrator import build_setting
        setting = build_setting(_preset(1))
        equilibria = find_equilibria(setting.system, 0.6, setting.state_grid, setting.control_grid)
        xs = [float(e.x[0]) for e in equilibria]
        assert min(abs(x - X_LOCAL) for x in xs) <= 1e-3
        assert min(abs(x - X_GLOBAL) for x in xs) <= 1e-3
        eq = equilibria[select_local_equilibrium(setting.system, equilibria)]
        storage = synthesize_linear_storage(setting.system, eq, 0.6)
        assert np.linalg.norm(storage.coefficients) <= 1e-6

    def test_threshold_report(self):
        """inf l~ = -0.4154 +- 0.005 and eta = rho/2 at rho = 0.3."""
        from core.orchestrator import run_thresholds
        report = run_thresholds(_preset(1, rho=0.3), verbose=False)
        assert report.ell_tilde_min == pytest.approx(-0.4154, abs=5e-3)
        assert report.eta == pytest.approx(0.15)
        assert 0 < report.beta_star < 0.5

    def test_basin_split(self):
        """beta = 0.6 stays in the local well, beta = 0.8 reaches the global one within five steps."""
        from core.schemas import TerminalClass
        config = _preset(1)
        traj, label, _ = _closed_loop(config, 0.6, -0.8)
        assert label == TerminalClass.LOCAL
        assert abs(traj.terminal[0] - X_LOCAL) <= 0.05
        traj, label, steps = _closed_loop(config, 0.8, -0.8)
        assert label == TerminalClass.GLOBAL
        assert abs(traj.terminal[0] - X_GLOBAL) <= 0.05
        assert steps <= 5

    def test_empirical_local_threshold(self):
        """A 0.01-step scan from x0 = -0.8 puts the threshold between 0.60 and 0.75."""
        from core.turnpike import beta_scan
        from data.examples import example_model
        betas = [round(0.6 + 0.01 * i, 2) for i in range(21)]
        table = beta_scan(example_model(1), [[-0.8]], betas, horizon=30, workers=4)
        assert table.beta_hat_2 is not None
        assert 0.60 <= table.beta_hat_2 <= 0.75


class TestExample2:
    """Example 1 with the gamma |u| control penalty."""

    def test_stays_near_start(self):
        """gamma = 10, beta = 0.7: moving never pays off."""
        traj, _, _ = _closed_loop(_preset(2), 0.7, -0.8)
        assert np.max(np.abs(traj.states[:, 0] + 0.8)) <= 0.1

    def test_no_local_discount_factor(self):
        """gamma = 10: no beta in 0.50..0.95 sends x0 = -0.8 to the local equilibrium."""
        from core.schemas import TerminalClass
        from core.turnpike import beta_scan
        from data.examples import example_model
        betas = [round(0.5 + 0.05 * i, 2) for i in range(10)]
        table = beta_scan(example_model(2), [[-0.8]], betas, horizon=30, workers=4)
        assert len(table.cells) == len(betas)
        assert all(c.label != TerminalClass.LOCAL for c in table.cells)
        assert table.beta_hat_2 is None

    def test_patient_controller_goes_global(self):
        """gamma = 10, beta = 0.99: the global well is worth the control effort."""
        from core.schemas import TerminalClass
        config = _preset(2, grid=401, ugrid=301)
        _, label, _ = _closed_loop(config, 0.99, -0.8, horizon=60)
        assert label == TerminalClass.GLOBAL


class TestExample3:
    """x+ = 2x + u with the indefinite cost."""

    def test_dissipativity_flips_once(self):
        """lambda = -x^2 is accepted from 0.605 on a 0.005-step grid over [0.50, 0.70]."""
        from core.dissipativity import verify_dissipativity
        from core.model import Box, DiscountedProblem, Equilibrium, StorageFunction, expand_model_spec
        from core.schemas import ModelKind, ModelSpec
        system = expand_model_spec(ModelSpec(kind=ModelKind.EXAMPLE_3))
        region = Box.from_intervals([(-1.0, 1.0)])
        accepted = []
        betas = [round(0.5 + 0.005 * i, 3) for i in range(41)]
        for beta in betas:
            eq = Equilibrium.at(system, [0.0], [0.0], beta)
            storage = StorageFunction.quadratic([-1.0], eq.x, system.state_box)
            accepted.append(verify_dissipativity(DiscountedProblem(system, beta), eq, storage, region).accepted)
        flips = [b for a, b, prev in zip(accepted[1:], betas[1:], accepted[:-1]) if a != prev]
        assert len(flips) == 1
        assert flips[0] == pytest.approx(0.6, abs=0.005)

    def test_rotated_cost_identity(self, rng):
        """l~ = (1 + beta) u^2 + 4 beta x u + (4 beta - 3/2) x^2 at 10^4 samples."""
        from core.model import (
            DiscountedProblem, Equilibrium, StorageFunction, expand_model_spec, rotated_cost_values,
        )
        from core.schemas import ModelKind, ModelSpec
        system = expand_model_spec(ModelSpec(kind=ModelKind.EXAMPLE_3))
        for beta in rng.uniform(0.05, 0.95, 100):
            eq = Equilibrium.at(system, [0.0], [0.0], beta)
            storage = StorageFunction.quadratic([-1.0], eq.x, system.state_box)
            x = rng.uniform(-0.4, 0.4, size=(100, 1))
            u = rng.uniform(-0.2, 0.2, size=(100, 1))
            expected = (1 + beta) * u[:, 0] ** 2 + 4 * beta * x[:, 0] * u[:, 0] + (4 * beta - 1.5) * x[:, 0] ** 2
            got = rotated_cost_values(DiscountedProblem(system, beta), eq, storage, x, u)
            np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_turnpike_at_origin(self):
        """beta = 0.7 from x0 = 1: at most five far steps and a terminal state near 0."""
        from core.turnpike import q_set
        traj, _, _ = _closed_loop(_preset(3), 0.7, 1.0)
        assert q_set(traj, [0.0], 0.1, 30).cardinality <= 5
        assert abs(traj.terminal[0]) <= 0.05

    def test_no_turnpike_below_threshold(self):
        """beta = 0.59 from x0 = 0.004 runs to the upper state bound."""
        traj, _, _ = _closed_loop(_preset(3), 0.59, 0.004)
        assert traj.terminal[0] >= 0.95
