"""
D.I.S.C.O. Turnpike Diagnostics
Q-sets, the C-bound and kappa, the leave-the-neighbourhood thresholds
(eta, delta, beta*, sigma, eps, theta), Lyapunov decrease and sublevel
invariance checks, and beta scans classifying long-run behaviour.
"""

import heapq
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from core.dissipativity import (
    find_equilibria,
    fit_comparison_upper,
    is_manifold_local_minimizer,
    select_local_equilibrium,
)
from core.errors import (
    ContinuityProbeError,
    DomainError,
    RegionError,
    TrajectoryLengthError,
)
from core.grid_dp import (
    GriddedValueFunction,
    Grid,
    Policy,
    Trajectory,
    extract_policy,
    rollout,
    value_iteration,
)
from core.model import (
    Box,
    ControlSystem,
    CostSpec,
    DiscountedProblem,
    Equilibrium,
    StorageFunction,
    expand_model_spec,
    rotated_cost_values,
)
from core.schemas import (
    BetaOneEstimate,
    CBoundReport,
    ComparisonFunction,
    CostKind,
    InvarianceResult,
    LocalTurnpikeConstants,
    LyapunovCheckReport,
    ModelSpec,
    QSetResult,
    RolloutMode,
    ScanCell,
    ScanTable,
    TerminalClass,
    ValueBoundReport,
)
from utils.logger import get_logger

logger = get_logger(__name__)

Array = np.ndarray

DENOMINATOR_FLOOR = 1e-12
LADDER_STEPS = 10
SETTLE_TOL = 0.01


# =============================================================================
# Q-SETS
# =============================================================================

def q_set(traj: Trajectory, x_ref, epsilon: float, M: int) -> QSetResult:
    """Times k <= M with |x(k) - x_ref| >= epsilon."""
    if epsilon <= 0:
        raise DomainError("epsilon must be positive")
    if traj.states.shape[0] < M + 1:
        raise TrajectoryLengthError(
            f"trajectory has {traj.states.shape[0]} states, need M+1 = {M + 1}"
        )
    ref = np.atleast_1d(np.asarray(x_ref, dtype=float))
    dist = np.linalg.norm(traj.states[:M + 1] - ref, axis=-1)
    indices = [int(k) for k in np.flatnonzero(dist >= epsilon)]
    return QSetResult(epsilon=float(epsilon), M=int(M), indices=indices, cardinality=len(indices))


# =============================================================================
# C-BOUND
# =============================================================================

def inf_rotated_cost(problem: DiscountedProblem, eq: Equilibrium, storage: StorageFunction,
                     nodes: Array, control_grid: Grid) -> Array:
    """min over admissible control-grid nodes of l~(x, u) at each state; +inf if none."""
    x = np.asarray(nodes, dtype=float)[:, None, :]
    u = control_grid.nodes[None, :, :]
    adm = problem.system.admissible(x, u)
    values = np.broadcast_to(rotated_cost_values(problem, eq, storage, x, u), adm.shape)
    return np.where(adm, values, np.inf).min(axis=1)


def estimate_C(V_rot: GriddedValueFunction, problem: DiscountedProblem, eq: Equilibrium,
               storage: StorageFunction, annulus: Tuple[float, float], control_grid: Grid) -> CBoundReport:
    """
    C = max over annulus nodes of V~(x) / inf_u l~(x, u), clamped to C >= 1.

    Nodes whose denominator is <= 1e-12 are excluded and listed.
    """
    lo, hi = float(annulus[0]), float(annulus[1])
    if lo < 0 or hi <= 0 or lo > hi:
        raise RegionError(f"invalid annulus [{lo}, {hi}]")
    nodes = V_rot.grid.nodes
    dist = np.linalg.norm(nodes - eq.x, axis=-1)
    inside = (dist >= lo) & (dist <= hi)
    if not inside.any():
        raise RegionError(f"annulus [{lo:g}, {hi:g}] around {eq.x.tolist()} holds no grid node")
    denominators = inf_rotated_cost(problem, eq, storage, nodes[inside], control_grid)
    usable = np.isfinite(denominators) & (denominators > DENOMINATOR_FLOOR)
    excluded = nodes[inside][~usable]
    if not usable.any():
        raise RegionError("every annulus node has inf l~ <= 1e-12; no ratio to bound")
    ratios = V_rot.values[inside][usable] / denominators[usable]
    ratio_max = float(np.max(ratios))
    C = max(ratio_max, 1.0)
    beta = problem.beta
    kappa = (1.0 - beta) - 1.0 / C
    report = CBoundReport(
        C=C, ratio_max=ratio_max, beta=beta, bound=1.0 / (1.0 - beta), kappa=kappa,
        satisfied=kappa < 0, annulus=(lo, hi), nodes_used=int(usable.sum()),
        excluded_nodes=excluded.tolist(),
    )
    logger.info(f"C-bound beta={beta:g}: C={C:.6g}, 1/(1-beta)={report.bound:.6g}, kappa={kappa:.4g}")
    return report


def c_from_exponential_stabilizability(sigma: float, rate: float) -> float:
    """C = sigma / (1 - exp(-rate)) for rotated costs decaying like sigma exp(-rate k)."""
    if sigma < 1 or rate <= 0:
        raise DomainError("exponential stabilizability needs sigma >= 1 and rate > 0")
    return float(sigma / (1.0 - math.exp(-rate)))


# =============================================================================
# LEAVE-THE-NEIGHBOURHOOD THRESHOLDS
# =============================================================================

def _probe_offsets(dim: int, radius: float, probe_nodes: int) -> Array:
    per_axis = min(probe_nodes, max(5, int(200_000 ** (1.0 / max(dim, 1)))))
    axis = np.linspace(-radius, radius, per_axis)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def eta_from_continuity(system: ControlSystem, eq: Equilibrium, rho: float, probe_nodes: int = 41) -> float:
    """
    Largest eps on the ladder rho, rho/2, ..., rho/2^10 with |f(x,u) - x_l| < rho
    whenever |x - x_l| < eps and |u - u_l| < eps (probed on a grid).
    """
    if rho <= 0:
        raise DomainError("rho must be positive")
    n, m = system.n, system.m
    for j in range(LADDER_STEPS + 1):
        eps = rho / 2 ** j
        offsets = _probe_offsets(n + m, eps, probe_nodes)
        dx, du = offsets[:, :n], offsets[:, n:]
        near = (np.linalg.norm(dx, axis=-1) < eps) & (np.linalg.norm(du, axis=-1) < eps)
        x = eq.x + dx[near]
        u = eq.u + du[near]
        keep = system.in_constraint_set(x, u)
        if not keep.any():
            continue
        image = system.f(x[keep], u[keep])
        if np.all(np.linalg.norm(image - eq.x, axis=-1) < rho):
            logger.info(f"eta = rho/2^{j} = {eps:.6g} (rho={rho:g})")
            return float(min(eps, rho))
    raise ContinuityProbeError(rho)


def beta_star(delta: float, ell_tilde_min: float, k_fraction: int = 1) -> float:
    """k/(k+1) * delta / (delta - ell_tilde_min); k = 1 gives delta / (2 (delta - ell_tilde_min))."""
    if delta <= 0:
        raise DomainError(f"delta must be positive, got {delta}")
    if ell_tilde_min > 0:
        raise DomainError(f"ell_tilde_min must be <= 0, got {ell_tilde_min}")
    if k_fraction < 1:
        raise DomainError("k_fraction must be at least 1")
    return k_fraction / (k_fraction + 1.0) * delta / (delta - ell_tilde_min)


def stay_sigma(beta: float, K: int, delta: float, k_fraction: int = 1) -> float:
    """sigma = beta^K delta / ((k+1)(1-beta))."""
    if not 0.0 < beta < 1.0:
        raise DomainError(f"beta must lie in (0, 1), got {beta}")
    if K < 1 or delta <= 0:
        raise DomainError("need K >= 1 and delta > 0")
    return beta ** K * delta / ((k_fraction + 1.0) * (1.0 - beta))


def sigma_eps_theta(beta: float, K: int, delta: float, gamma: ComparisonFunction,
                    k_fraction: int = 1) -> Tuple[float, float, float]:
    """sigma = beta^K delta / ((k+1)(1-beta)), theta = sigma/2, eps = gamma^-1(sigma/2)."""
    sigma = stay_sigma(beta, K, delta, k_fraction)
    theta = sigma / 2.0
    return sigma, gamma.inverse(theta), theta


def value_comparison_upper(V_rot: GriddedValueFunction, eq: Equilibrium, region: Box) -> ComparisonFunction:
    """gamma with |V~(x)| <= gamma(|x - x_l|) on the region nodes."""
    nodes = V_rot.grid.nodes
    inside = region.contains(nodes, tol=1e-12)
    if not inside.any():
        raise RegionError("region holds no value-function node")
    dist = np.linalg.norm(nodes[inside] - eq.x, axis=-1)
    return fit_comparison_upper(dist, np.abs(V_rot.values[inside]))


def local_turnpike_constants(beta: float, M: int, theta: float, kappa: float, level: float) -> LocalTurnpikeConstants:
    """
    delta = beta^M min(theta, -kappa level / (2 beta), level / 2); needs kappa < 0.

    theta is the one-step value sigma(beta, 1) / 2, whatever K the stay estimate used.
    """
    if kappa >= 0:
        raise DomainError(f"local turnpike constants need kappa < 0, got {kappa:.4g}")
    if level <= 0 or theta <= 0:
        raise DomainError("level and theta must be positive")
    delta = beta ** M * min(theta, -kappa * level / (2.0 * beta), level / 2.0)
    return LocalTurnpikeConstants(beta=beta, M=int(M), theta=theta, kappa=kappa, level=level, delta=delta)


# =============================================================================
# LYAPUNOV AND INVARIANCE CHECKS
# =============================================================================

def lyapunov_decrease_check(V_rot: GriddedValueFunction, problem: DiscountedProblem, eq: Equilibrium,
                            storage: StorageFunction, traj: Trajectory, C: float,
                            delta: float = 0.0) -> LyapunovCheckReport:
    """
    r(k) = V~(x(k+1)) - V~(x(k)) - (kappa/beta) V~(x(k)) - delta / beta^(k+1).

    Passes when every residual is within the interpolation slack
    (3 omega + fixed-point bound) / beta, omega the grid modulus of continuity.
    """
    states = traj.states
    if not np.all(V_rot.grid.box.contains(states, tol=1e-12)):
        raise DomainError("trajectory leaves the value-function grid")
    beta = problem.beta
    kappa = (1.0 - beta) - 1.0 / C
    values = np.asarray(V_rot(states), dtype=float).reshape(-1)
    k = np.arange(values.size - 1)
    residuals = values[1:] - values[:-1] - kappa / beta * values[:-1] - delta / beta ** (k + 1)
    slack = (3.0 * V_rot.modulus_of_continuity() + V_rot.bellman_residual) / beta
    max_residual = float(residuals.max()) if residuals.size else 0.0
    return LyapunovCheckReport(
        residuals=residuals.tolist(),
        max_residual=max_residual,
        slack=slack,
        kappa=kappa,
        delta=delta,
        passed=bool(max_residual <= slack),
    )


def largest_sublevel_level(V_rot: GriddedValueFunction, region: Box, anchor) -> float:
    """
    Largest level whose sublevel component around the anchor node stays in the region.

    Bottleneck flood from the anchor: the level is the minimax node value on a
    path to the first node outside the region; max V + 1 when none exists.
    """
    grid = V_rot.grid
    values = V_rot.values
    inside = region.contains(grid.nodes, tol=1e-12)
    if inside.all():
        return float(values.max() + 1.0)
    start = int(grid.nearest_index(np.atleast_1d(anchor))[0])
    if not inside[start]:
        raise RegionError("anchor lies outside the region")
    seen = np.zeros(grid.size, dtype=bool)
    heap = [(float(values[start]), start)]
    seen[start] = True
    bottleneck = -np.inf
    while heap:
        value, node = heapq.heappop(heap)
        bottleneck = max(bottleneck, value)
        if not inside[node]:
            return float(bottleneck)
        for nb in grid.neighbors(node):
            if not seen[nb]:
                seen[nb] = True
                heapq.heappush(heap, (float(values[nb]), nb))
    return float(values.max() + 1.0)


def _leaks(grid: Grid, members: Array, outside_low: Array) -> bool:
    """Any member node axis-adjacent to an outside node below the level."""
    a = members.reshape(grid.shape)
    b = outside_low.reshape(grid.shape)
    for axis in range(grid.dim):
        head = [slice(None)] * grid.dim
        tail = [slice(None)] * grid.dim
        head[axis] = slice(0, -1)
        tail[axis] = slice(1, None)
        if np.any(a[tuple(head)] & b[tuple(tail)]) or np.any(b[tuple(head)] & a[tuple(tail)]):
            return True
    return False


def sublevel_invariance_check(V_rot: GriddedValueFunction, problem: DiscountedProblem, policy: Policy,
                              region: Box, level: float) -> InvarianceResult:
    """
    Closed-loop forward invariance of {x in region : V~(x) < level} on the grid.

    Every member node's successor under the node policy must stay in the
    region with interpolated V~ below the level; the witness is the first
    node that fails.
    """
    if level <= 0:
        raise DomainError("level must be positive")
    grid = V_rot.grid
    nodes = grid.nodes
    in_region = region.contains(nodes, tol=1e-12)
    members = in_region & (V_rot.values < level)
    if _leaks(grid, members, ~in_region & (V_rot.values < level)):
        logger.warning(f"sublevel set at level {level:.6g} reaches past the region boundary")
    idx = np.flatnonzero(members)
    if idx.size == 0:
        return InvarianceResult(holds=True, level=level, checked_nodes=0)
    succ = problem.system.f(nodes[idx], policy.controls[idx])
    ok = region.contains(succ, tol=1e-12) & (np.asarray(V_rot(succ)).reshape(-1) < level)
    if ok.all():
        return InvarianceResult(holds=True, level=level, checked_nodes=int(idx.size))
    witness = nodes[idx[np.flatnonzero(~ok)[0]]]
    logger.info(f"sublevel set at level {level:.6g} is not invariant; witness x={witness.tolist()}")
    return InvarianceResult(holds=False, level=level, checked_nodes=int(idx.size), witness=witness.tolist())


def value_lower_bound_check(V_rot: GriddedValueFunction, eq: Equilibrium, alpha: ComparisonFunction,
                            region: Box) -> ValueBoundReport:
    """V~(x) >= alpha(|x - x_l|) on the region nodes, up to the fixed-point bound."""
    nodes = V_rot.grid.nodes
    inside = region.contains(nodes, tol=1e-12)
    if not inside.any():
        raise RegionError("region holds no value-function node")
    dist = np.linalg.norm(nodes[inside] - eq.x, axis=-1)
    gaps = V_rot.values[inside] - np.asarray(alpha(dist))
    worst = int(np.argmin(gaps))
    min_gap = float(gaps[worst])
    return ValueBoundReport(
        passed=min_gap >= -(V_rot.bellman_residual + 1e-12),
        min_gap=min_gap,
        worst_node=nodes[inside][worst].tolist(),
        nodes_checked=int(inside.sum()),
    )


# =============================================================================
# SUBOPTIMAL TRAJECTORIES
# =============================================================================

def suboptimality_gap(traj: Trajectory, V: GriddedValueFunction) -> float:
    """J_N(x0, u) + beta^N V(x(N)) - V(x0): the delta of a delta-suboptimal trajectory."""
    rotated = V.cost.kind == CostKind.ROTATED and traj.rotated_sums is not None
    sums = traj.rotated_sums if rotated else traj.discounted_sums
    ends = np.asarray(V(traj.states[[0, -1]])).reshape(-1)
    return float(sums[-1] + traj.beta ** traj.N * ends[1] - ends[0])


def perturbed_controls(traj: Trajectory, perturbation: float, control_box: Box) -> Array:
    """Optimal control sequence with the first control shifted and clipped into the box."""
    controls = np.array(traj.controls, dtype=float, copy=True)
    if controls.shape[0]:
        controls[0] = control_box.clip(controls[0] + perturbation)
    return controls


# =============================================================================
# SCANS
# =============================================================================

def minimizing_equilibria(system: ControlSystem, equilibria: Sequence[Equilibrium]) -> List[int]:
    """Indices of the equilibria that locally minimize l on the equilibrium manifold."""
    return [j for j, eq in enumerate(equilibria) if is_manifold_local_minimizer(system, eq)]


def classify_terminal(states: Array, equilibria: Sequence[Equilibrium], state_box: Box,
                      tol: float = 0.05, settle_tol: float = SETTLE_TOL,
                      targets: Optional[Sequence[int]] = None
                      ) -> Tuple[TerminalClass, Optional[int], Optional[int]]:
    """
    Label the end of a closed-loop trajectory.

    At an equilibrium when within tol of it and the trajectory approached it
    (final distance <= settle_tol or <= half the initial distance); index 0
    is the global one. Only the equilibria listed in targets can label a run
    (all of them when None), so stationary points that are not minimizers are
    skipped by passing minimizing_equilibria(...). Otherwise boundary when
    within tol of a box face, else none. Returns (label, equilibrium index,
    first step within tol).
    """
    states = np.asarray(states, dtype=float)
    final, start = states[-1], states[0]
    candidates = range(len(equilibria)) if targets is None else [int(j) for j in targets]
    if candidates:
        dists = np.array([np.linalg.norm(final - equilibria[j].x) for j in candidates])
        j = candidates[int(np.argmin(dists))]
        d = float(dists.min())
        initial = float(np.linalg.norm(start - equilibria[j].x))
        if d <= tol and (d <= settle_tol or d <= 0.5 * initial):
            reached = np.flatnonzero(np.linalg.norm(states - equilibria[j].x, axis=-1) <= tol)
            label = TerminalClass.GLOBAL if j == 0 else TerminalClass.LOCAL
            return label, j, int(reached[0])
    face = np.minimum(np.abs(states - state_box.lower), np.abs(states - state_box.upper)).min(axis=-1)
    if face[-1] <= tol:
        return TerminalClass.BOUNDARY, None, int(np.flatnonzero(face <= tol)[0])
    return TerminalClass.NONE, None, None


def _scan_beta(system: ControlSystem, beta: float, x0_list: Sequence, horizon: int,
               state_grid: Grid, control_grid: Grid, equilibria: Sequence[Equilibrium],
               tol: float, max_iter: int, classify_tol: float, targets: Sequence[int],
               mode: RolloutMode, refine: bool) -> List[ScanCell]:
    problem = DiscountedProblem(system, beta)
    V = value_iteration(problem, state_grid, control_grid, CostSpec.original(), tol=tol, max_iter=max_iter)
    policy = extract_policy(V, problem, control_grid)
    cells = []
    for x0 in x0_list:
        traj = rollout(policy, problem, x0, horizon, mode=mode, refine=refine)
        label, idx, steps = classify_terminal(traj.states, equilibria, system.state_box, tol=classify_tol,
                                              targets=targets)
        x0_arr = np.atleast_1d(np.asarray(x0, dtype=float))
        cells.append(ScanCell(
            beta=beta,
            x0=x0_arr.tolist(),
            label=label,
            terminal_x=traj.terminal.tolist(),
            nearest_equilibrium=idx,
            max_excursion=float(np.max(np.linalg.norm(traj.states - x0_arr, axis=-1))),
            steps_to_target=steps,
            states=traj.states.tolist(),
        ))
        logger.debug(f"beta={beta:g} x0={x0_arr.tolist()}: {label.value}")
    return cells


def empirical_local_threshold(cells: Sequence[ScanCell], equilibria: Sequence[Equilibrium],
                              local_index: int) -> Optional[float]:
    """
    Largest beta of the leading run of betas whose near-x_l starts all stay local.

    The run starts at the smallest scanned beta and ends at the first beta
    with a non-local near-x_l start; local labels past that beta are ignored,
    so the result is not always the largest beta labelled local. A start is
    near x_l when x_l is its nearest equilibrium.
    """
    if local_index == 0 or not equilibria:
        return None
    near = [
        c for c in cells
        if int(np.argmin([np.linalg.norm(np.asarray(c.x0) - e.x) for e in equilibria])) == local_index
    ]
    best = None
    for beta in sorted({c.beta for c in near}):
        if all(c.label == TerminalClass.LOCAL for c in near if c.beta == beta):
            best = beta
        else:
            break
    return best


def beta_scan(model: ModelSpec, x0_list: Sequence, beta_grid: Sequence[float], horizon: int = 30,
              state_nodes: int = 801, control_nodes: int = 601, tol: float = 1e-6,
              max_iter: int = 10000, classify_tol: float = 0.05, workers: int = 1,
              mode: RolloutMode = RolloutMode.ARGMIN, refine: bool = False,
              anchor: Optional[int] = None,
              progress: Optional[Callable[[float], None]] = None) -> ScanTable:
    """
    Solve, roll out and classify every (beta, x0) pair.

    Betas run concurrently on a thread pool; the table is assembled in
    beta-grid order so the result does not depend on the worker count.
    """
    system = expand_model_spec(model)
    state_grid = Grid.uniform(system.state_box, state_nodes)
    control_grid = Grid.uniform(system.control_box, control_nodes)
    betas = [float(b) for b in beta_grid]
    equilibria = find_equilibria(system, betas[0], state_grid, control_grid)
    targets = minimizing_equilibria(system, equilibria)

    def run(beta: float) -> List[ScanCell]:
        cells = _scan_beta(system, beta, x0_list, horizon, state_grid, control_grid, equilibria,
                           tol, max_iter, classify_tol, targets, mode, refine)
        if progress is not None:
            progress(beta)
        return cells

    if workers > 1 and len(betas) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_beta = list(pool.map(run, betas))
    else:
        per_beta = [run(b) for b in betas]
    cells = [c for group in per_beta for c in group]

    beta_hat = None
    if equilibria:
        local_index = select_local_equilibrium(system, equilibria, anchor)
        beta_hat = empirical_local_threshold(cells, equilibria, local_index)
    logger.info(f"scan finished: {len(cells)} runs, empirical local threshold {beta_hat}")
    return ScanTable(
        model=model, horizon=horizon, tolerance=classify_tol,
        equilibria=[e.to_record() for e in equilibria], cells=cells, beta_hat_2=beta_hat,
    )


def rotated_value_function(problem: DiscountedProblem, eq: Equilibrium, storage: StorageFunction,
                           state_grid: Grid, control_grid: Grid, tol: float = 1e-6,
                           max_iter: int = 10000, workers: int = 1) -> GriddedValueFunction:
    """Value iteration on the rotated stage cost."""
    return value_iteration(problem, state_grid, control_grid, CostSpec.rotated(eq, storage),
                           tol=tol, max_iter=max_iter, workers=workers)


def estimate_beta_one(system: ControlSystem, eq: Equilibrium,
                      storage_for: Callable[[float], StorageFunction], betas: Sequence[float],
                      state_grid: Grid, control_grid: Grid, annulus: Tuple[float, float],
                      tol: float = 1e-6, max_iter: int = 10000) -> BetaOneEstimate:
    """
    Smallest beta of an ascending grid whose C-bound holds on the annulus.

    Heuristic: only the C-bound hypothesis is tested.
    """
    reports: List[CBoundReport] = []
    for beta in sorted(float(b) for b in betas):
        problem = DiscountedProblem(system, beta)
        storage = storage_for(beta)
        V_rot = rotated_value_function(problem, eq, storage, state_grid, control_grid, tol, max_iter)
        report = estimate_C(V_rot, problem, eq, storage, annulus, control_grid)
        reports.append(report)
        if report.satisfied:
            return BetaOneEstimate(beta_one=beta, reports=reports)
    return BetaOneEstimate(beta_one=None, reports=reports)
