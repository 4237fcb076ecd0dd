"""
D.I.S.C.O. Grid Dynamic Programming
Value iteration for discounted infinite-horizon problems on rectangular grids,
feedback policies, closed-loop rollouts, open-loop evaluation and an
exhaustive finite-horizon oracle.

The Bellman operator
    (T V)(x) = min_{u in control grid, (x,u) admissible} cost(x,u) + beta * Interp(V)(f(x,u))
is applied Jacobi-style: every sweep reads only the previous iterate, so the
result does not depend on the number of workers. Ties in the minimum go to
the smallest control-grid index, i.e. the lexicographically smallest control.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import minimize, minimize_scalar

from core.errors import (
    BudgetExceededError,
    DomainError,
    InadmissibleControlError,
    InfeasibleNodeError,
    NonConvergenceError,
)
from core.interpolation import interpolate, transition_matrix
from core.model import Box, CostSpec, DiscountedProblem
from core.schemas import CostKind, RolloutMode
from utils.logger import get_logger
from utils.numerics import split_pair

logger = get_logger(__name__)

Array = np.ndarray

BRUTE_FORCE_BUDGET = 10 ** 7


# =============================================================================
# GRIDS
# =============================================================================

@dataclass(frozen=True)
class Grid:
    """Rectilinear grid; nodes are enumerated in C ('ij') order."""
    axes: Tuple[Array, ...]

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        for k, a in enumerate(axes):
            if a.ndim != 1 or a.size < 2:
                raise DomainError(f"grid axis {k} needs at least 2 nodes")
            if np.any(np.diff(a) <= 0):
                raise DomainError(f"grid axis {k} is not strictly increasing")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def uniform(cls, box: Box, nodes: Union[int, Sequence[int]]) -> "Grid":
        counts = [int(nodes)] * box.dim if np.isscalar(nodes) else [int(c) for c in nodes]
        if len(counts) != box.dim:
            raise DomainError(f"need one node count per axis ({box.dim}), got {len(counts)}")
        return cls(tuple(np.linspace(lo, hi, c) for lo, hi, c in zip(box.lower, box.upper, counts)))

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(a.size for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def box(self) -> Box:
        return Box([a[0] for a in self.axes], [a[-1] for a in self.axes])

    @cached_property
    def nodes(self) -> Array:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def spacing(self) -> Array:
        """Largest cell width per axis."""
        return np.array([np.max(np.diff(a)) for a in self.axes])

    @property
    def cell_diameter(self) -> float:
        return float(np.linalg.norm(self.spacing))

    def nearest_index(self, points) -> Array:
        """Flat index of the nearest node (per axis rounding, ties to the lower node)."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        multi = []
        for k, a in enumerate(self.axes):
            c = np.clip(pts[:, k], a[0], a[-1])
            hi = np.clip(np.searchsorted(a, c, side="left"), 1, a.size - 1)
            lo = hi - 1
            multi.append(np.where(c - a[lo] <= a[hi] - c, lo, hi))
        return np.ravel_multi_index(tuple(multi), self.shape)

    def neighbors(self, flat_index: int) -> List[int]:
        """Axis-adjacent nodes of a node."""
        multi = np.unravel_index(int(flat_index), self.shape)
        out = []
        for k in range(self.dim):
            for step in (-1, 1):
                j = multi[k] + step
                if 0 <= j < self.shape[k]:
                    idx = list(multi)
                    idx[k] = j
                    out.append(int(np.ravel_multi_index(tuple(idx), self.shape)))
        return out

    def coordinate_columns(self, prefix: str = "x") -> List[str]:
        return [f"{prefix}{k}" for k in range(self.dim)]


# =============================================================================
# VALUE FUNCTIONS, POLICIES, TRAJECTORIES
# =============================================================================

@dataclass(frozen=True)
class GriddedValueFunction:
    """Node values of V_inf (original cost) or V~_inf (rotated cost)."""
    grid: Grid
    values: Array
    beta: float
    kind: CostKind
    bellman_residual: float
    tol: float
    iterations: int = 0
    cost: CostSpec = field(default_factory=CostSpec)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if values.size != self.grid.size:
            raise DomainError(f"expected {self.grid.size} node values, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise DomainError("value function has non-finite node values")
        object.__setattr__(self, "values", values)

    def __call__(self, points) -> Array:
        return interpolate(self.grid.axes, self.values, points)

    def modulus_of_continuity(self) -> float:
        """Largest difference between axis-adjacent node values."""
        table = self.values.reshape(self.grid.shape)
        return float(max(np.max(np.abs(np.diff(table, axis=k))) for k in range(self.grid.dim)))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.grid.nodes, columns=self.grid.coordinate_columns())
        frame["value"] = self.values
        return frame

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path

    @classmethod
    def read_csv(cls, path: Union[str, Path], beta: float, kind: CostKind = CostKind.ORIGINAL,
                 cost: Optional[CostSpec] = None, tol: float = np.inf,
                 bellman_residual: float = 0.0) -> "GriddedValueFunction":
        frame = pd.read_csv(path, float_precision="round_trip")
        coords = [c for c in frame.columns if c != "value"]
        frame = frame.sort_values(coords, kind="stable")
        axes = tuple(np.unique(frame[c].to_numpy()) for c in coords)
        grid = Grid(axes)
        if grid.size != len(frame):
            raise DomainError(f"{path} does not hold a full rectilinear grid")
        cost = cost or CostSpec.original()
        if cost.kind != kind:
            raise DomainError(f"a {kind.value} value table needs a {kind.value} cost specification")
        return cls(grid, frame["value"].to_numpy(), beta, kind, bellman_residual, tol, cost=cost)


@dataclass(frozen=True)
class Policy:
    """Minimizing control-grid node at every state node."""
    grid: Grid
    control_grid: Grid
    control_indices: Array
    value_function: GriddedValueFunction

    @property
    def controls(self) -> Array:
        return self.control_grid.nodes[self.control_indices]

    def nearest(self, points) -> Array:
        return self.controls[self.grid.nearest_index(points)]

    def interpolated(self, points) -> Array:
        pts = np.asarray(points, dtype=float).reshape(-1, self.grid.dim)
        cols = [interpolate(self.grid.axes, self.controls[:, j], pts) for j in range(self.controls.shape[1])]
        return np.stack(cols, axis=-1)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.grid.nodes, columns=self.grid.coordinate_columns())
        for j in range(self.control_grid.dim):
            frame[f"u{j}"] = self.controls[:, j]
        return frame

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path


@dataclass(frozen=True)
class Trajectory:
    """
    States x(0..N), controls u(0..N-1) and discounted cost accumulators.

    discounted_sums[k] = sum_{j<k} beta^j l(x(j), u(j)); index N is the total.
    """
    states: Array
    controls: Array
    stage_costs: Array
    discounted_sums: Array
    beta: float
    rotated_costs: Optional[Array] = None
    rotated_sums: Optional[Array] = None
    exited: bool = False
    exit_index: Optional[int] = None

    @property
    def N(self) -> int:
        return int(self.controls.shape[0])

    @property
    def terminal(self) -> Array:
        return self.states[-1]

    @property
    def cost(self) -> float:
        return float(self.discounted_sums[-1])

    @property
    def rotated_cost(self) -> Optional[float]:
        return None if self.rotated_sums is None else float(self.rotated_sums[-1])

    def to_frame(self) -> pd.DataFrame:
        n = self.states.shape[1]
        m = self.controls.shape[1] if self.controls.ndim == 2 and self.controls.shape[1] else 0
        rows = self.states.shape[0]
        frame = pd.DataFrame({"k": np.arange(rows)})
        for i in range(n):
            frame[f"x{i}"] = self.states[:, i]
        pad = np.full((1,), np.nan)
        for j in range(m):
            frame[f"u{j}"] = np.concatenate([self.controls[:, j], pad])
        frame["stage_cost"] = np.concatenate([self.stage_costs, pad])
        frame["discounted_partial_sum"] = self.discounted_sums
        if self.rotated_costs is not None:
            frame["rotated_stage_cost"] = np.concatenate([self.rotated_costs, pad])
            frame["rotated_partial_sum"] = self.rotated_sums
        return frame

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path


def _discounted_partial_sums(costs: Array, beta: float) -> Array:
    sums = np.zeros(costs.size + 1)
    if costs.size:
        sums[1:] = np.cumsum(beta ** np.arange(costs.size) * costs)
    return sums


def build_trajectory(problem: DiscountedProblem, states: Sequence, controls: Sequence,
                     cost: Optional[CostSpec] = None, exited: bool = False,
                     exit_index: Optional[int] = None) -> Trajectory:
    """Assemble a Trajectory with stage costs and partial sums from raw sequences."""
    system = problem.system
    x = np.asarray(states, dtype=float).reshape(-1, system.n)
    u = np.asarray(controls, dtype=float).reshape(-1, system.m)
    if u.shape[0]:
        stage = np.asarray(system.cost(x[:-1], u), dtype=float).reshape(-1)
    else:
        stage = np.zeros(0)
    rotated = rotated_sums = None
    if cost is not None and cost.kind == CostKind.ROTATED:
        rotated = np.asarray(cost.evaluate(problem, x[:-1], u), dtype=float).reshape(-1) if u.shape[0] else np.zeros(0)
        rotated_sums = _discounted_partial_sums(rotated, problem.beta)
    return Trajectory(x, u, stage, _discounted_partial_sums(stage, problem.beta), problem.beta,
                      rotated, rotated_sums, exited, exit_index)


# =============================================================================
# BELLMAN OPERATOR
# =============================================================================

class BellmanOperator:
    """
    Discrete Bellman operator with fixed multilinear interpolation.

    Precomputes the (state node, control node) cost table, with +inf on
    inadmissible pairs, and the sparse interpolation matrix of the successors.
    """

    def __init__(self, problem: DiscountedProblem, grid: Grid, control_grid: Grid,
                 cost: Optional[CostSpec] = None, workers: int = 1):
        system = problem.system
        if grid.dim != system.n or control_grid.dim != system.m:
            raise DomainError("grid dimensions do not match the system")
        if not system.control_box.contains_box(control_grid.box):
            raise DomainError("control grid leaves the control box")
        if not grid.box.contains_box(system.state_box):
            logger.warning(
                f"state grid {grid.box.intervals()} does not cover the state box "
                f"{system.state_box.intervals()}; successors outside it are clipped to the grid"
            )
        self.problem = problem
        self.grid = grid
        self.control_grid = control_grid
        self.cost = cost or CostSpec.original()
        self.workers = max(1, int(workers))

        x = grid.nodes[:, None, :]
        u = control_grid.nodes[None, :, :]
        successors = system.f(x, u)
        admissible = system.admissible(x, u)
        with np.errstate(invalid="ignore", over="ignore"):
            table = np.asarray(self.cost.evaluate(problem, x, u), dtype=float)
        table = np.broadcast_to(table, admissible.shape).copy()
        table[~admissible] = np.inf

        infeasible = ~admissible.any(axis=1)
        if infeasible.any():
            raise InfeasibleNodeError(grid.nodes[infeasible])

        self.admissible = admissible
        self.costs = table
        self.successors = successors
        clipped = grid.box.clip(successors.reshape(-1, system.n))
        self.transition = transition_matrix(grid.axes, clipped)
        self._chunks = self._row_chunks() if self.workers > 1 else []

    @property
    def beta(self) -> float:
        return self.problem.beta

    def _row_chunks(self):
        n_states = self.grid.size
        n_controls = self.control_grid.size
        bounds = np.linspace(0, n_states, self.workers + 1).astype(int)
        chunks = []
        for a, b in zip(bounds[:-1], bounds[1:]):
            if b > a:
                chunks.append((a, b, self.transition[a * n_controls:b * n_controls]))
        return chunks

    def _q_chunk(self, values: Array, chunk) -> Array:
        a, b, rows = chunk
        continuation = (rows @ values).reshape(b - a, self.control_grid.size)
        return self.costs[a:b] + self.beta * continuation

    def q_values(self, values: Array) -> Array:
        """cost(x_i, u_j) + beta * Interp(V)(f(x_i, u_j)) for all node pairs."""
        values = np.asarray(values, dtype=float).ravel()
        if self.workers == 1 or len(self._chunks) == 1:
            return self.costs + self.beta * (self.transition @ values).reshape(self.costs.shape)
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            parts = list(pool.map(lambda ch: self._q_chunk(values, ch), self._chunks))
        return np.vstack(parts)

    def apply(self, values: Array) -> Array:
        return self.q_values(values).min(axis=1)

    def greedy(self, values: Array) -> Tuple[Array, Array]:
        """(argmin control index, minimum) per node; first index wins ties."""
        q = self.q_values(values)
        idx = np.argmin(q, axis=1)
        return idx, q[np.arange(q.shape[0]), idx]


# =============================================================================
# VALUE ITERATION AND POLICIES
# =============================================================================

def value_iteration(problem: DiscountedProblem, grid: Grid, control_grid: Grid,
                    cost: Optional[CostSpec] = None, tol: float = 1e-6, max_iter: int = 10000,
                    workers: int = 1, operator: Optional[BellmanOperator] = None) -> GriddedValueFunction:
    """
    Fixed-point iteration V_{n+1} = T V_n from V_0 = 0.

    Stops once |V_{n+1} - V_n|_inf <= tol (1 - beta) / beta, which bounds the
    distance of the returned iterate to the discrete fixed point by tol; that
    bound is reported as bellman_residual.
    """
    if tol <= 0:
        raise DomainError("tol must be positive")
    op = operator or BellmanOperator(problem, grid, control_grid, cost, workers)
    beta = problem.beta
    threshold = tol * (1.0 - beta) / beta
    values = np.zeros(grid.size)
    bound = np.inf
    for iteration in range(1, max_iter + 1):
        updated = op.apply(values)
        diff = float(np.max(np.abs(updated - values)))
        values = updated
        bound = beta / (1.0 - beta) * diff
        if iteration % 50 == 0:
            logger.debug(f"sweep {iteration}: update {diff:.3e}, fixed-point bound {bound:.3e}")
        if diff <= threshold:
            logger.info(
                f"value iteration converged: beta={beta:g}, {iteration} sweeps, "
                f"residual bound {bound:.3e} <= tol {tol:.1e} ({grid.size} nodes x {control_grid.size} controls)"
            )
            return GriddedValueFunction(grid, values, beta, op.cost.kind, bound, tol, iteration, op.cost)
    raise NonConvergenceError(bound, max_iter)


def extract_policy(V: GriddedValueFunction, problem: DiscountedProblem, control_grid: Grid,
                   operator: Optional[BellmanOperator] = None) -> Policy:
    """Greedy policy of V over the control grid (first minimizing index on ties)."""
    op = operator or BellmanOperator(problem, V.grid, control_grid, V.cost)
    idx, _ = op.greedy(V.values)
    return Policy(V.grid, control_grid, idx, V)


def _argmin_control(policy: Policy, problem: DiscountedProblem, x: Array, refine: bool) -> Optional[Array]:
    system = problem.system
    V = policy.value_function
    controls = policy.control_grid.nodes
    xs = np.broadcast_to(x, (controls.shape[0], x.size))
    admissible = system.admissible(xs, controls)
    if not admissible.any():
        return None
    q = np.full(controls.shape[0], np.inf)
    ok = np.flatnonzero(admissible)
    q[ok] = V.cost.evaluate(problem, xs[ok], controls[ok]) + problem.beta * V(system.f(xs[ok], controls[ok]))
    best = int(np.argmin(q))
    u = controls[best]
    if refine and system.m == 1:
        axis = policy.control_grid.axes[0]
        lo = axis[max(best - 1, 0)]
        hi = axis[min(best + 1, axis.size - 1)]

        def objective(s: float) -> float:
            cand = np.array([s])
            if not check_pair(problem, x, cand):
                return np.inf
            return float(V.cost.evaluate(problem, x, cand) + problem.beta * V(system.f(x, cand)[None, :])[0])

        result = minimize_scalar(objective, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
        if result.success and np.isfinite(result.fun) and result.fun < q[best]:
            u = np.array([result.x])
    return u


def check_pair(problem: DiscountedProblem, x: Array, u: Array) -> bool:
    return bool(problem.system.admissible(x, u))


def rollout(policy: Policy, problem: DiscountedProblem, x0, N: int,
            mode: RolloutMode = RolloutMode.ARGMIN, refine: bool = False) -> Trajectory:
    """
    Closed-loop simulation x(k+1) = f(x(k), u(k)) for N steps on exact dynamics.

    argmin re-minimizes cost + beta * Interp(V) o f at the continuous state;
    nearest and interpolate look the control up in the node policy. A step
    that would leave the admissible set truncates the trajectory.
    """
    system = problem.system
    x = np.atleast_1d(np.asarray(x0, dtype=float))
    if x.shape != (system.n,) or not bool(system.state_box.contains(x)):
        raise DomainError(f"initial state {x.tolist()} is outside the state box")
    states = [x]
    controls = []
    exited, exit_index = False, None
    for k in range(int(N)):
        if mode == RolloutMode.ARGMIN:
            u = _argmin_control(policy, problem, x, refine)
        elif mode == RolloutMode.NEAREST:
            u = policy.nearest(x)[0]
        else:
            u = policy.interpolated(x)[0]
        if u is None or not check_pair(problem, x, u):
            exited, exit_index = True, k
            logger.warning(f"rollout left the admissible set at step {k} (x={x.tolist()})")
            break
        x = system.f(x, u)
        controls.append(np.asarray(u, dtype=float))
        states.append(x)
    return build_trajectory(problem, np.array(states), np.array(controls).reshape(-1, system.m),
                            policy.value_function.cost, exited, exit_index)


def evaluate_open_loop(problem: DiscountedProblem, x0, controls: Sequence,
                       cost: Optional[CostSpec] = None) -> Trajectory:
    """Apply a fixed control sequence; raises at the first inadmissible step."""
    system = problem.system
    x = np.atleast_1d(np.asarray(x0, dtype=float))
    if x.shape != (system.n,) or not bool(system.state_box.contains(x)):
        raise InadmissibleControlError(0, f"initial state {x.tolist()} is outside the state box")
    seq = np.asarray(controls, dtype=float).reshape(-1, system.m)
    states = [x]
    for k, u in enumerate(seq):
        if not check_pair(problem, x, u):
            raise InadmissibleControlError(k, f"(x, u) = ({x.tolist()}, {u.tolist()})")
        x = system.f(x, u)
        states.append(x)
    return build_trajectory(problem, np.array(states), seq, cost)


# =============================================================================
# EXHAUSTIVE ORACLE
# =============================================================================

@dataclass(frozen=True)
class ValueInterval:
    """Enclosure [lower, upper] of the optimal value from a truncated enumeration."""
    lower: float
    upper: float
    truncated_min: float
    tailbound: float
    best_controls: Array

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lower + self.upper)

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float, slack: float = 0.0) -> bool:
        return self.lower - slack <= value <= self.upper + slack


def sup_abs_cost(problem: DiscountedProblem, control_grid: Grid, cost: Optional[CostSpec] = None,
                 state_nodes: int = 101) -> float:
    """
    sup |cost| over admissible pairs: a state grid times the control grid,
    then a bounded local search from the sampled maximizer.
    """
    cost = cost or CostSpec.original()
    system = problem.system
    grid = Grid.uniform(system.state_box, state_nodes)
    x = grid.nodes[:, None, :]
    u = control_grid.nodes[None, :, :]
    admissible = system.admissible(x, u)
    if not admissible.any():
        return 0.0
    values = np.broadcast_to(np.abs(np.asarray(cost.evaluate(problem, x, u), dtype=float)), admissible.shape)
    masked = np.where(admissible, values, -np.inf)
    i, j = np.unravel_index(int(np.argmax(masked)), masked.shape)
    sampled = float(masked[i, j])

    n = system.n

    def objective(zv: Array) -> float:
        xv, uv = split_pair(zv, n)
        if not bool(system.admissible(xv, uv)):
            return 0.0
        return -abs(float(cost.evaluate(problem, xv, uv)))

    bounds = list(zip(np.concatenate([system.state_box.lower, system.control_box.lower]),
                      np.concatenate([system.state_box.upper, system.control_box.upper])))
    start = np.concatenate([grid.nodes[i], control_grid.nodes[j]])
    polished = minimize(objective, start, method="Powell", bounds=bounds,
                        options={"xtol": 1e-12, "ftol": 1e-14, "maxfev": 4000})
    return max(sampled, -float(polished.fun))


def brute_force_value(problem: DiscountedProblem, x0, control_grid: Grid, K: int,
                      cost: Optional[CostSpec] = None, cost_bound: Optional[float] = None,
                      budget: int = BRUTE_FORCE_BUDGET) -> ValueInterval:
    """
    Enumerate every admissible control sequence of length K on the control grid.

    Returns [min truncated cost - tail, min truncated cost + tail] with
    tail = beta^K sup|cost| / (1 - beta). Dynamics are exact; inadmissible
    branches are pruned as soon as they appear.
    """
    system = problem.system
    cost = cost or CostSpec.original()
    controls = control_grid.nodes
    required = controls.shape[0] ** int(K)
    if required > budget:
        raise BudgetExceededError(required, budget)
    beta = problem.beta
    if cost_bound is None:
        cost_bound = sup_abs_cost(problem, control_grid, cost)
    tail = beta ** K * float(cost_bound) / (1.0 - beta)

    x = np.atleast_1d(np.asarray(x0, dtype=float))[None, :]
    acc = np.zeros(1)
    history = np.zeros((1, 0), dtype=np.int64)
    for k in range(int(K)):
        xs = np.repeat(x, controls.shape[0], axis=0)
        us = np.tile(controls, (x.shape[0], 1))
        ok = system.admissible(xs, us)
        if not ok.any():
            raise InfeasibleNodeError([np.atleast_1d(x0)], hint=f"no admissible sequence survives step {k}")
        step_cost = np.asarray(cost.evaluate(problem, xs[ok], us[ok]), dtype=float)
        acc = np.repeat(acc, controls.shape[0])[ok] + beta ** k * step_cost
        choice = np.tile(np.arange(controls.shape[0]), x.shape[0])[ok]
        history = np.hstack([np.repeat(history, controls.shape[0], axis=0)[ok], choice[:, None]])
        x = system.f(xs[ok], us[ok])
    best = int(np.argmin(acc))
    m = float(acc[best])
    return ValueInterval(m - tail, m + tail, m, tail, controls[history[best]])
