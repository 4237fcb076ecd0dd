"""
D.I.S.C.O. Model Layer
Control systems, discounted problems, equilibria, storage functions and the
rotated stage cost. Pure evaluation: nothing in here solves anything.

Array convention: states have shape (..., n), controls (..., m); dynamics
return (..., n) and stage costs (...). Leading axes broadcast.
"""

from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.errors import (
    ConstraintViolationError,
    DomainError,
    ImageOutOfDomainError,
    ModelSpecError,
)
from core.interpolation import interpolate
from core.schemas import (
    CostKind,
    EquilibriumRecord,
    ModelKind,
    ModelSpec,
    PolynomialTerm,
    StorageForm,
    StorageRecord,
)

Array = np.ndarray
DynamicsFn = Callable[[Array, Array], Array]
CostFn = Callable[[Array, Array], Array]
PredicateFn = Callable[[Array, Array], Array]

# Absolute slack for box membership of computed images f(x, u).
BOX_TOL = 1e-12

DEFAULT_EQUILIBRIUM_TOL = 1e-8


# =============================================================================
# BOXES AND SYSTEMS
# =============================================================================

@dataclass(frozen=True)
class Box:
    """Axis-aligned box [lower, upper] in R^d."""
    lower: Array
    upper: Array

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ModelSpecError("box bounds must be 1-D arrays of equal length")
        if np.any(lower > upper):
            raise ModelSpecError(f"box lower bound {lower} exceeds upper bound {upper}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def from_intervals(cls, intervals: Sequence[Tuple[float, float]]) -> "Box":
        pairs = np.asarray(intervals, dtype=float).reshape(-1, 2)
        return cls(pairs[:, 0], pairs[:, 1])

    @property
    def dim(self) -> int:
        return int(self.lower.size)

    @property
    def center(self) -> Array:
        return 0.5 * (self.lower + self.upper)

    @property
    def half_widths(self) -> Array:
        return 0.5 * (self.upper - self.lower)

    def intervals(self) -> List[Tuple[float, float]]:
        return [(float(lo), float(hi)) for lo, hi in zip(self.lower, self.upper)]

    def contains(self, points, tol: float = 0.0) -> Array:
        p = np.asarray(points, dtype=float)
        return np.all((p >= self.lower - tol) & (p <= self.upper + tol), axis=-1)

    def contains_box(self, other: "Box", tol: float = BOX_TOL) -> bool:
        return bool(np.all(other.lower >= self.lower - tol) and np.all(other.upper <= self.upper + tol))

    def clip(self, points) -> Array:
        return np.clip(np.asarray(points, dtype=float), self.lower, self.upper)

    def intersect(self, other: "Box") -> "Box":
        lower = np.maximum(self.lower, other.lower)
        upper = np.minimum(self.upper, other.upper)
        if np.any(lower > upper):
            raise DomainError("boxes do not intersect")
        return Box(lower, upper)

    @classmethod
    def around(cls, center, radius: float) -> "Box":
        c = np.atleast_1d(np.asarray(center, dtype=float))
        return cls(c - radius, c + radius)

    def inner_radius(self, center) -> float:
        """Distance from center to the nearest face (0 if center is outside)."""
        c = np.atleast_1d(np.asarray(center, dtype=float))
        return float(max(0.0, np.min(np.minimum(c - self.lower, self.upper - c))))


@dataclass(frozen=True)
class ControlSystem:
    """
    Discrete-time control system x+ = f(x, u) with stage cost l(x, u).

    joint_constraint realizes Y inside X x U; None means the product box.
    """
    dynamics: DynamicsFn
    stage_cost: CostFn
    state_box: Box
    control_box: Box
    joint_constraint: Optional[PredicateFn] = None
    name: str = "custom"

    @property
    def n(self) -> int:
        return self.state_box.dim

    @property
    def m(self) -> int:
        return self.control_box.dim

    def f(self, x, u) -> Array:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return np.asarray(self.dynamics(x, u), dtype=float)

    def cost(self, x, u) -> Array:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return np.asarray(self.stage_cost(x, u), dtype=float)

    def in_constraint_set(self, x, u) -> Array:
        """Membership of (x, u) in Y."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        inside = self.state_box.contains(x) & self.control_box.contains(u)
        if self.joint_constraint is not None:
            inside = inside & np.asarray(self.joint_constraint(x, u), dtype=bool)
        return inside

    def admissible(self, x, u) -> Array:
        """(x, u) in Y and f(x, u) in X, elementwise over leading axes."""
        return self.in_constraint_set(x, u) & self.state_box.contains(self.f(x, u), tol=BOX_TOL)


@dataclass(frozen=True)
class DiscountedProblem:
    """A control system together with a discount factor beta in (0, 1)."""
    system: ControlSystem
    beta: float

    def __post_init__(self):
        if not 0.0 < float(self.beta) < 1.0:
            raise DomainError(f"discount factor must lie in (0, 1), got {self.beta}")
        object.__setattr__(self, "beta", float(self.beta))


@dataclass(frozen=True)
class Equilibrium:
    """Equilibrium (x, u) with f(x, u) = x up to residual."""
    x: Array
    u: Array
    beta: float
    stage_cost_value: float
    residual: float
    refined: bool = True

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        object.__setattr__(self, "u", np.atleast_1d(np.asarray(self.u, dtype=float)))

    @classmethod
    def at(cls, system: ControlSystem, x, u, beta: float, refined: bool = True) -> "Equilibrium":
        """Build an equilibrium record by evaluating the system at (x, u)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        u = np.atleast_1d(np.asarray(u, dtype=float))
        residual = float(np.linalg.norm(system.f(x, u) - x))
        return cls(x, u, float(beta), float(system.cost(x, u)), residual, refined)

    def to_record(self) -> EquilibriumRecord:
        return EquilibriumRecord(
            x=self.x.tolist(), u=self.u.tolist(), beta=self.beta,
            stage_cost_value=self.stage_cost_value, residual=self.residual, refined=self.refined,
        )


# =============================================================================
# STORAGE FUNCTIONS
# =============================================================================

@dataclass(frozen=True)
class StorageFunction:
    """
    Storage function lambda anchored at an equilibrium state.

    linear:     lambda(x) = nu . (x - anchor)
    quadratic:  lambda(x) = sum_i c_i (x_i - anchor_i)^2
    tabulated:  lambda(x) = T(x) - T(anchor), T a gridded table
    """
    form: StorageForm
    anchor: Array
    coefficients: Array = field(default_factory=lambda: np.zeros(0))
    table: Optional[Callable[[Array], Array]] = None
    lower_bound: float = 0.0
    synthesis_residual: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "anchor", np.atleast_1d(np.asarray(self.anchor, dtype=float)))
        object.__setattr__(self, "coefficients", np.atleast_1d(np.asarray(self.coefficients, dtype=float)))
        if self.form != StorageForm.TABULATED and self.coefficients.shape != self.anchor.shape:
            raise ModelSpecError("storage coefficients must match the state dimension")
        if self.form == StorageForm.TABULATED and self.table is None:
            raise ModelSpecError("tabulated storage needs a table")

    # -------------------------------------------------------------------------
    # constructors
    # -------------------------------------------------------------------------

    @classmethod
    def zero(cls, anchor) -> "StorageFunction":
        anchor = np.atleast_1d(np.asarray(anchor, dtype=float))
        return cls(StorageForm.LINEAR, anchor, np.zeros_like(anchor), lower_bound=0.0)

    @classmethod
    def linear(cls, nu, anchor, state_box: Box, synthesis_residual: Optional[float] = None) -> "StorageFunction":
        nu = np.atleast_1d(np.asarray(nu, dtype=float))
        anchor = np.atleast_1d(np.asarray(anchor, dtype=float))
        ends = np.stack([nu * (state_box.lower - anchor), nu * (state_box.upper - anchor)])
        return cls(StorageForm.LINEAR, anchor, nu, lower_bound=float(ends.min(axis=0).sum()),
                   synthesis_residual=synthesis_residual)

    @classmethod
    def quadratic(cls, coefficients, anchor, state_box: Box) -> "StorageFunction":
        c = np.atleast_1d(np.asarray(coefficients, dtype=float))
        anchor = np.atleast_1d(np.asarray(anchor, dtype=float))
        lo_dev = state_box.lower - anchor
        hi_dev = state_box.upper - anchor
        nearest = np.where((lo_dev <= 0) & (hi_dev >= 0), 0.0, np.minimum(lo_dev ** 2, hi_dev ** 2))
        farthest = np.maximum(lo_dev ** 2, hi_dev ** 2)
        return cls(StorageForm.QUADRATIC, anchor, c,
                   lower_bound=float(np.where(c >= 0, c * nearest, c * farthest).sum()))

    @classmethod
    def tabulated(cls, table, anchor) -> "StorageFunction":
        """table: callable on (..., n) points exposing `values` at its nodes (multilinear)."""
        anchor = np.atleast_1d(np.asarray(anchor, dtype=float))
        offset = float(table(anchor[None, :])[0])
        return cls(StorageForm.TABULATED, anchor, np.zeros(0), table=table,
                   lower_bound=float(np.min(table.values) - offset))

    # -------------------------------------------------------------------------
    # evaluation
    # -------------------------------------------------------------------------

    def __call__(self, x) -> Array:
        x = np.asarray(x, dtype=float)
        if self.form == StorageForm.LINEAR:
            return np.sum(self.coefficients * (x - self.anchor), axis=-1)
        if self.form == StorageForm.QUADRATIC:
            return np.sum(self.coefficients * (x - self.anchor) ** 2, axis=-1)
        flat = x.reshape(-1, self.anchor.size)
        values = self.table(flat) - self.table(self.anchor[None, :])[0]
        return values.reshape(x.shape[:-1])

    def to_record(self) -> StorageRecord:
        return StorageRecord(
            form=self.form, anchor=self.anchor.tolist(), coefficients=self.coefficients.tolist(),
            lower_bound=self.lower_bound, synthesis_residual=self.synthesis_residual,
        )


# =============================================================================
# ROTATED COST
# =============================================================================

def rotated_cost_values(problem: DiscountedProblem, eq: Equilibrium, storage: StorageFunction, x, u) -> Array:
    """Vectorized l~(x,u) = l(x,u) - l(x_eq,u_eq) + lambda(x) - beta*lambda(f(x,u)); no admissibility check."""
    system = problem.system
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return system.cost(x, u) - eq.stage_cost_value + storage(x) - problem.beta * storage(system.f(x, u))


def check_admissible(system: ControlSystem, x, u) -> bool:
    """True iff (x, u) in Y and f(x, u) in X."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.shape != (system.n,) or u.shape != (system.m,):
        return False
    return bool(system.admissible(x, u))


def evaluate_rotated_cost(problem: DiscountedProblem, eq: Equilibrium, storage: StorageFunction, x, u) -> float:
    """Rotated stage cost at a single admissible pair."""
    system = problem.system
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if not bool(system.in_constraint_set(x, u)):
        raise ConstraintViolationError(f"(x, u) = ({x.tolist()}, {u.tolist()}) is outside the constraint set")
    image = system.f(x, u)
    if not bool(system.state_box.contains(image, tol=BOX_TOL)):
        raise ImageOutOfDomainError(f"f(x, u) = {image.tolist()} leaves the state box")
    return float(rotated_cost_values(problem, eq, storage, x, u))


@dataclass(frozen=True)
class CostSpec:
    """Stage cost used by the dynamic programming layer: original l or rotated l~."""
    kind: CostKind = CostKind.ORIGINAL
    equilibrium: Optional[Equilibrium] = None
    storage: Optional[StorageFunction] = None

    @classmethod
    def original(cls) -> "CostSpec":
        return cls()

    @classmethod
    def rotated(cls, equilibrium: Equilibrium, storage: StorageFunction) -> "CostSpec":
        return cls(CostKind.ROTATED, equilibrium, storage)

    def __post_init__(self):
        if self.kind == CostKind.ROTATED and (self.equilibrium is None or self.storage is None):
            raise ModelSpecError("rotated cost needs an equilibrium and a storage function")

    def evaluate(self, problem: DiscountedProblem, x, u) -> Array:
        if self.kind == CostKind.ORIGINAL:
            return problem.system.cost(x, u)
        return rotated_cost_values(problem, self.equilibrium, self.storage, x, u)


# =============================================================================
# MODEL SPEC EXPANSION
# =============================================================================

EXAMPLE_1_STATE_BOX = [(-2.0, 2.0)]
EXAMPLE_1_CONTROL_BOX = [(-0.75, 0.75)]
EXAMPLE_3_STATE_BOX = [(-1.0, 1.0)]
EXAMPLE_3_CONTROL_BOX = [(-3.0, 3.0)]


def _shift_dynamics(x: Array, u: Array) -> Array:
    return x + u


def _quartic_cost(x: Array, u: Array) -> Array:
    s = x[..., 0] + 0.0 * u[..., 0]
    return s ** 4 - s ** 3 / 4 - 7 * s ** 2 / 4


def _quartic_cost_with_control_penalty(x: Array, u: Array, gamma: float) -> Array:
    return _quartic_cost(x, u) + gamma * np.sum(np.abs(u), axis=-1)


def _doubling_dynamics(x: Array, u: Array) -> Array:
    return 2 * x + u


def _concave_convex_cost(x: Array, u: Array) -> Array:
    return -x[..., 0] ** 2 / 2 + u[..., 0] ** 2


def _monomials(terms: Sequence[PolynomialTerm], n: int, m: int, where: str):
    coeffs = np.array([t.c for t in terms], dtype=float)
    xp = np.zeros((len(terms), n), dtype=int)
    up = np.zeros((len(terms), m), dtype=int)
    for i, t in enumerate(terms):
        if len(t.x) not in (0, n) or len(t.u) not in (0, m):
            raise ModelSpecError(
                f"{where}: term {i} has exponent lengths ({len(t.x)}, {len(t.u)}), expected ({n}, {m})"
            )
        if t.x:
            xp[i] = t.x
        if t.u:
            up[i] = t.u
    return coeffs, xp, up


def _polynomial(x: Array, u: Array, coeffs: Array, xp: Array, up: Array) -> Array:
    if coeffs.size == 0:
        return np.zeros(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]))
    xs = x[..., None, :] ** xp
    us = u[..., None, :] ** up
    return np.sum(coeffs * np.prod(xs, axis=-1) * np.prod(us, axis=-1), axis=-1)


def _polynomial_dynamics(x: Array, u: Array, tables) -> Array:
    return np.stack([_polynomial(x, u, *t) for t in tables], axis=-1)


def _polynomial_cost(x: Array, u: Array, table, gamma: float) -> Array:
    value = _polynomial(x, u, *table)
    if gamma:
        value = value + gamma * np.sum(np.abs(u), axis=-1)
    return value


def expand_model_spec(spec: ModelSpec) -> ControlSystem:
    """Turn a serializable ModelSpec into an evaluable ControlSystem."""
    if spec.kind in (ModelKind.EXAMPLE_1, ModelKind.EXAMPLE_2):
        state_box = Box.from_intervals(spec.state_box or EXAMPLE_1_STATE_BOX)
        control_box = Box.from_intervals(spec.control_box or EXAMPLE_1_CONTROL_BOX)
        if state_box.dim != 1 or control_box.dim != 1:
            raise ModelSpecError("builtin examples are one-dimensional")
        if spec.kind == ModelKind.EXAMPLE_2 and spec.gamma != 0.0:
            cost = partial(_quartic_cost_with_control_penalty, gamma=float(spec.gamma))
        else:
            cost = _quartic_cost
        name = "example-1" if spec.kind == ModelKind.EXAMPLE_1 else f"example-2(gamma={spec.gamma:g})"
        return ControlSystem(_shift_dynamics, cost, state_box, control_box, name=name)

    if spec.kind == ModelKind.EXAMPLE_3:
        state_box = Box.from_intervals(spec.state_box or EXAMPLE_3_STATE_BOX)
        control_box = Box.from_intervals(spec.control_box or EXAMPLE_3_CONTROL_BOX)
        if state_box.dim != 1 or control_box.dim != 1:
            raise ModelSpecError("builtin examples are one-dimensional")
        return ControlSystem(_doubling_dynamics, _concave_convex_cost, state_box, control_box, name="example-3")

    state_box = Box.from_intervals(spec.state_box)
    control_box = Box.from_intervals(spec.control_box)
    n, m = state_box.dim, control_box.dim
    if n > 3 or m > 3:
        raise ModelSpecError(f"dimensions n={n}, m={m} exceed the supported envelope of 3")
    if len(spec.f_coeffs) != n:
        raise ModelSpecError(f"f_coeffs has {len(spec.f_coeffs)} components, state dimension is {n}")
    f_tables = [_monomials(terms, n, m, f"f_coeffs[{i}]") for i, terms in enumerate(spec.f_coeffs)]
    l_table = _monomials(spec.l_coeffs, n, m, "l_coeffs")
    return ControlSystem(
        partial(_polynomial_dynamics, tables=f_tables),
        partial(_polynomial_cost, table=l_table, gamma=float(spec.gamma)),
        state_box,
        control_box,
        name="polynomial",
    )


# =============================================================================
# STORAGE SPECIFICATIONS
# =============================================================================

class StorageTable:
    """Node table read from a CSV with columns x0..x{n-1}, value; multilinear in between."""

    def __init__(self, axes: Sequence[Array], values: Array):
        self.axes = tuple(np.asarray(a, dtype=float) for a in axes)
        self.values = np.asarray(values, dtype=float).ravel()

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "StorageTable":
        frame = pd.read_csv(path, float_precision="round_trip")
        if "value" not in frame.columns:
            raise ModelSpecError(f"{path}: storage table needs a 'value' column")
        coords = [c for c in frame.columns if c != "value"]
        frame = frame.sort_values(coords, kind="stable")
        axes = [np.unique(frame[c].to_numpy()) for c in coords]
        if int(np.prod([a.size for a in axes])) != len(frame) or any(a.size < 2 for a in axes):
            raise ModelSpecError(f"{path} does not hold a full rectilinear grid")
        return cls(axes, frame["value"].to_numpy())

    def __call__(self, points) -> Array:
        return interpolate(self.axes, self.values, points)


def _parse_numbers(text: str, n: int, what: str) -> Array:
    try:
        numbers = np.array([float(s) for s in text.split(",")], dtype=float)
    except ValueError as exc:
        raise ModelSpecError(f"cannot parse {what} coefficients '{text}'") from exc
    if numbers.size == 1 and n > 1:
        numbers = np.full(n, numbers[0])
    if numbers.size != n:
        raise ModelSpecError(f"{what} storage needs {n} coefficients, got {numbers.size}")
    return numbers


def parse_storage(text: str, anchor, state_box: Box) -> Optional[StorageFunction]:
    """
    Storage from a CLI spec: zero | linear:nu1,.. | quadratic:c1,.. | tabulated:PATH.

    'auto' returns None: the caller synthesizes a linear storage instead.
    A single quadratic or linear coefficient is broadcast to every axis.
    """
    spec = text.strip()
    anchor = np.atleast_1d(np.asarray(anchor, dtype=float))
    n = anchor.size
    head, _, tail = spec.partition(":")
    head = head.lower()
    if head == "auto":
        return None
    if head == "zero":
        return StorageFunction.zero(anchor)
    if head == "linear":
        return StorageFunction.linear(_parse_numbers(tail, n, "linear"), anchor, state_box)
    if head in ("quadratic", "quadratic-diagonal"):
        return StorageFunction.quadratic(_parse_numbers(tail, n, "quadratic"), anchor, state_box)
    if head == "tabulated":
        if not tail:
            raise ModelSpecError("tabulated storage needs a CSV path, e.g. tabulated:storage.csv")
        table = StorageTable.read_csv(tail)
        if len(table.axes) != n:
            raise ModelSpecError(f"storage table has {len(table.axes)} coordinates, state dimension is {n}")
        return StorageFunction.tabulated(table, anchor)
    raise ModelSpecError(
        f"unknown storage spec '{text}'",
        hint="use auto, zero, linear:NU, quadratic:C or tabulated:PATH",
    )
