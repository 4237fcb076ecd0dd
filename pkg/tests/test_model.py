"""
Tests for the model layer: boxes, systems, storage functions and rotated costs.
"""
import json
from pathlib import Path

import numpy as np
import pytest

CONFIG_DIR = Path(__file__).parent.parent / "data" / "configs"


class TestBox:
    """Test constraint boxes."""

    def test_contains_and_clip(self):
        """Points on the faces are inside; clip projects onto the box."""
        from core.model import Box
        box = Box.from_intervals([(-1.0, 1.0), (0.0, 2.0)])
        assert box.contains([1.0, 0.0])
        assert not box.contains([1.1, 0.5])
        np.testing.assert_allclose(box.clip([3.0, -1.0]), [1.0, 0.0])

    def test_inner_radius(self):
        """Distance to the nearest face, zero outside."""
        from core.model import Box
        box = Box.from_intervals([(-1.2, -0.5)])
        assert box.inner_radius([-0.8]) == pytest.approx(0.3)
        assert box.inner_radius([0.0]) == 0.0

    def test_inverted_bounds_rejected(self):
        """Lower bound above upper bound is a model error."""
        from core.errors import ModelSpecError
        from core.model import Box
        with pytest.raises(ModelSpecError):
            Box.from_intervals([(1.0, -1.0)])

    def test_disjoint_intersection(self):
        """Intersecting disjoint boxes raises DomainError."""
        from core.errors import DomainError
        from core.model import Box
        with pytest.raises(DomainError):
            Box.from_intervals([(0.0, 1.0)]).intersect(Box.from_intervals([(2.0, 3.0)]))


class TestModelSpec:
    """Test model descriptions and their expansion."""

    def test_builtin_names(self, example1, example3):
        """Builtin examples expand to named one-dimensional systems."""
        assert example1.name == "example-1"
        assert example3.name == "example-3"
        assert example1.n == example1.m == 1

    def test_example_1_cost(self, example1):
        """l(x, u) = x^4 - x^3/4 - 7x^2/4, independent of u."""
        x = np.array([[0.5], [-1.0]])
        u = np.array([[0.3], [-0.7]])
        expected = np.array([0.0625 - 0.03125 - 0.4375, 1.0 + 0.25 - 1.75])
        np.testing.assert_allclose(example1.cost(x, u), expected)

    def test_example_2_control_penalty(self):
        """Example 2 adds gamma * |u|."""
        from core.model import expand_model_spec
        from core.schemas import ModelKind, ModelSpec
        system = expand_model_spec(ModelSpec(kind=ModelKind.EXAMPLE_2, gamma=10.0))
        assert system.name == "example-2(gamma=10)"
        assert float(system.cost([0.0], [-0.5])) == pytest.approx(5.0)

    def test_example_3_dynamics(self, example3):
        """x+ = 2x + u."""
        np.testing.assert_allclose(example3.f([0.25], [0.1]), [0.6])

    def test_polynomial_matches_builtin(self, example1, rng):
        """The sample polynomial config reproduces Example 1 exactly."""
        from core.model import expand_model_spec
        from core.schemas import ModelSpec
        doc = json.loads((CONFIG_DIR / "sample_polynomial.json").read_text(encoding="utf-8"))
        system = expand_model_spec(ModelSpec.model_validate(doc["model"]))
        x = rng.uniform(-2.0, 2.0, size=(50, 1))
        u = rng.uniform(-0.75, 0.75, size=(50, 1))
        np.testing.assert_allclose(system.f(x, u), example1.f(x, u), atol=1e-12)
        np.testing.assert_allclose(system.cost(x, u), example1.cost(x, u), atol=1e-12)

    def test_polynomial_requires_tables(self):
        """A polynomial model without coefficient tables fails validation."""
        from pydantic import ValidationError
        from core.schemas import ModelKind, ModelSpec
        with pytest.raises(ValidationError):
            ModelSpec(kind=ModelKind.POLYNOMIAL, state_box=[(-1.0, 1.0)], control_box=[(-1.0, 1.0)])

    def test_polynomial_dimension_envelope(self):
        """State dimension above 3 is rejected."""
        from core.errors import ModelSpecError
        from core.model import expand_model_spec
        from core.schemas import ModelKind, ModelSpec, PolynomialTerm
        term = PolynomialTerm(c=1.0)
        spec = ModelSpec(
            kind=ModelKind.POLYNOMIAL,
            f_coeffs=[[term]] * 4,
            l_coeffs=[term],
            state_box=[(-1.0, 1.0)] * 4,
            control_box=[(-1.0, 1.0)],
        )
        with pytest.raises(ModelSpecError):
            expand_model_spec(spec)

    def test_discount_factor_domain(self, example1):
        """beta must lie strictly between 0 and 1."""
        from core.errors import DomainError
        from core.model import DiscountedProblem
        with pytest.raises(DomainError):
            DiscountedProblem(example1, 1.0)


class TestStorage:
    """Test storage functions and their CLI parsing."""

    def test_parse_auto_and_zero(self):
        """auto leaves synthesis to the caller; zero is identically zero."""
        from core.model import Box, parse_storage
        box = Box.from_intervals([(-2.0, 2.0)])
        assert parse_storage("auto", [0.5], box) is None
        zero = parse_storage("zero", [0.5], box)
        assert float(zero(np.array([1.7]))) == 0.0

    def test_parse_quadratic(self):
        """quadratic:c gives c (x - anchor)^2 and a lower bound over the box."""
        from core.model import Box, parse_storage
        from core.schemas import StorageForm
        box = Box.from_intervals([(-1.0, 1.0)])
        storage = parse_storage("quadratic:-1", [0.0], box)
        assert storage.form == StorageForm.QUADRATIC
        assert float(storage(np.array([0.5]))) == pytest.approx(-0.25)
        assert storage.lower_bound == pytest.approx(-1.0)

    def test_parse_linear_vanishes_at_anchor(self):
        """Linear storage is zero at its anchor."""
        from core.model import Box, parse_storage
        box = Box.from_intervals([(-2.0, 2.0)])
        storage = parse_storage("linear:0.4", [-0.8], box)
        assert float(storage(np.array([-0.8]))) == 0.0
        assert float(storage(np.array([0.2]))) == pytest.approx(0.4)

    def test_parse_tabulated(self, tmp_path):
        """A CSV table is interpolated and shifted to vanish at the anchor."""
        import pandas as pd
        from core.model import Box, parse_storage
        path = tmp_path / "storage.csv"
        pd.DataFrame({"x0": [-1.0, 0.0, 1.0], "value": [1.0, 0.0, 2.0]}).to_csv(path, index=False)
        storage = parse_storage(f"tabulated:{path}", [0.0], Box.from_intervals([(-1.0, 1.0)]))
        assert float(storage(np.array([0.5]))) == pytest.approx(1.0)
        assert storage.lower_bound == pytest.approx(0.0)

    def test_parse_errors(self):
        """Unknown forms and wrong coefficient counts are model errors."""
        from core.errors import ModelSpecError
        from core.model import Box, parse_storage
        box = Box.from_intervals([(-1.0, 1.0), (-1.0, 1.0)])
        with pytest.raises(ModelSpecError):
            parse_storage("cubic:1", [0.0, 0.0], box)
        with pytest.raises(ModelSpecError):
            parse_storage("linear:1,2,3", [0.0, 0.0], box)


class TestRotatedCost:
    """Test the rotated stage cost."""

    def test_zero_at_equilibrium(self, example1):
        """l~ vanishes at the equilibrium for any storage anchored there."""
        from core.model import DiscountedProblem, Equilibrium, StorageFunction, evaluate_rotated_cost
        problem = DiscountedProblem(example1, 0.6)
        eq = Equilibrium.at(example1, [-0.8], [0.0], 0.6)
        storage = StorageFunction.linear([0.3], eq.x, example1.state_box)
        assert evaluate_rotated_cost(problem, eq, storage, [-0.8], [0.0]) == pytest.approx(0.0, abs=1e-14)

    def test_definition(self, example3):
        """l~ = l - l_eq + lambda(x) - beta lambda(f(x, u))."""
        from core.model import DiscountedProblem, Equilibrium, StorageFunction, evaluate_rotated_cost
        problem = DiscountedProblem(example3, 0.7)
        eq = Equilibrium.at(example3, [0.0], [0.0], 0.7)
        storage = StorageFunction.quadratic([-1.0], eq.x, example3.state_box)
        x, u = 0.2, -0.1
        expected = (-x ** 2 / 2 + u ** 2) - x ** 2 + 0.7 * (2 * x + u) ** 2
        assert evaluate_rotated_cost(problem, eq, storage, [x], [u]) == pytest.approx(expected)

    def test_constraint_errors(self, example1):
        """Pairs outside Y and pairs leaving X raise distinct errors."""
        from core.errors import ConstraintViolationError, ImageOutOfDomainError
        from core.model import DiscountedProblem, Equilibrium, StorageFunction, evaluate_rotated_cost
        problem = DiscountedProblem(example1, 0.6)
        eq = Equilibrium.at(example1, [-0.8], [0.0], 0.6)
        storage = StorageFunction.zero(eq.x)
        with pytest.raises(ConstraintViolationError):
            evaluate_rotated_cost(problem, eq, storage, [0.0], [1.0])
        with pytest.raises(ImageOutOfDomainError):
            evaluate_rotated_cost(problem, eq, storage, [1.9], [0.5])

    def test_check_admissible(self, example1):
        """Admissible iff (x, u) in Y and f(x, u) in X."""
        from core.model import check_admissible
        assert check_admissible(example1, [1.5], [0.5])
        assert not check_admissible(example1, [1.9], [0.5])
        assert not check_admissible(example1, [0.0, 0.0], [0.0])


class TestComparisonFunction:
    """Test piecewise-linear comparison functions."""

    def test_evaluate_and_extend(self):
        """Linear between breakpoints, last slope beyond them."""
        from core.schemas import ComparisonFunction
        alpha = ComparisonFunction(breakpoints=[0.0, 1.0, 2.0], values=[0.0, 1.0, 3.0])
        assert alpha(0.5) == pytest.approx(0.5)
        assert alpha(3.0) == pytest.approx(5.0)

    def test_inverse(self):
        """Inverse by bisection, out of range only on request."""
        from core.errors import ComparisonRangeError
        from core.schemas import ComparisonFunction
        alpha = ComparisonFunction(breakpoints=[0.0, 1.0, 2.0], values=[0.0, 1.0, 3.0])
        assert alpha.inverse(2.0) == pytest.approx(1.5, abs=1e-9)
        with pytest.raises(ComparisonRangeError):
            alpha.inverse(4.0)
        assert alpha.inverse(5.0, extrapolate=True) == pytest.approx(3.0, abs=1e-9)

    def test_not_increasing_rejected(self):
        """Non-monotone values fail validation."""
        from pydantic import ValidationError
        from core.schemas import ComparisonFunction
        with pytest.raises(ValidationError):
            ComparisonFunction(breakpoints=[0.0, 1.0, 2.0], values=[0.0, 2.0, 1.0])
