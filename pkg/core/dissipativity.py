"""
D.I.S.C.O. Dissipativity Analysis
Equilibria, linear storage synthesis, grid verification of (local) discounted
strict dissipativity and comparison-function fitting.

Equilibria are stationary points of the stage cost restricted to the
equilibrium manifold {(x, u) : f(x, u) = x}: the gradient of l projected onto
the null space of [df/dx - I, df/du] vanishes there. The supply rate is
always s(x, u) = l(x, u) - l(x_eq, u_eq).
"""

from typing import List, Optional, Sequence

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import least_squares, minimize
from scipy.spatial import cKDTree

from core.errors import NotPositiveDefiniteError, RegionError, StorageSynthesisError
from core.grid_dp import Grid
from core.model import (
    DEFAULT_EQUILIBRIUM_TOL,
    Box,
    ControlSystem,
    DiscountedProblem,
    Equilibrium,
    StorageFunction,
    rotated_cost_values,
)
from core.schemas import ComparisonFunction, DissipativityReport, DissipativityVariant
from utils.logger import get_logger
from utils.numerics import central_gradient, central_jacobian, fd_steps, split_pair

logger = get_logger(__name__)

Array = np.ndarray

MAX_SEEDS = 64
JOINT_CANDIDATE_BUDGET = 500_000
LISTED_VIOLATIONS = 50
DEVIATION_DECIMALS = 12
FIT_TOL = 1e-10


# =============================================================================
# EQUILIBRIA
# =============================================================================

def _joint_maps(system: ControlSystem):
    n = system.n

    def residual(z: Array) -> Array:
        x, u = split_pair(z, n)
        return system.f(x, u) - x

    def cost(z: Array) -> Array:
        x, u = split_pair(z, n)
        return system.cost(x, u)

    return residual, cost


def _batch_derivatives(system: ControlSystem, z: Array):
    """Per-point FD gradient of l (P, d) and Jacobian of f - x (P, n, d)."""
    residual, cost = _joint_maps(system)
    P, d = z.shape
    h = fd_steps(z)
    grad = np.empty((P, d))
    jac = np.empty((P, system.n, d))
    for i in range(d):
        step = np.zeros_like(z)
        step[:, i] = h[:, i]
        grad[:, i] = (cost(z + step) - cost(z - step)) / (2.0 * h[:, i])
        jac[:, :, i] = (residual(z + step) - residual(z - step)) / (2.0 * h[:, i])[:, None]
    return grad, jac


def _projected_gradient(grad: Array, jac: Array) -> Array:
    """(I - J^+ J) g: component of g tangent to the equilibrium manifold."""
    d = grad.shape[-1]
    projector = np.eye(d) - np.linalg.pinv(jac) @ jac
    return np.einsum("...ij,...j->...i", projector, grad)


def _stationarity_system(system: ControlSystem):
    residual, cost = _joint_maps(system)

    def F(z: Array) -> Array:
        g = central_gradient(cost, z)
        J = central_jacobian(residual, z)
        return np.concatenate([residual(z[None, :])[0], _projected_gradient(g, J)])

    return F


def _search_grids(state_grid: Grid, control_grid: Grid):
    """Uniformly coarsened copies when the joint grid exceeds the candidate budget."""
    total = state_grid.size * control_grid.size
    if total <= JOINT_CANDIDATE_BUDGET:
        return state_grid, control_grid
    shrink = (total / JOINT_CANDIDATE_BUDGET) ** (1.0 / (state_grid.dim + control_grid.dim))
    coarse = [
        Grid.uniform(g.box, [max(3, int(len(a) / shrink)) for a in g.axes]) for g in (state_grid, control_grid)
    ]
    logger.debug(f"equilibrium search on coarsened grids {coarse[0].shape} x {coarse[1].shape}")
    return coarse[0], coarse[1]


def find_equilibria(system: ControlSystem, beta: float, state_grid: Grid, control_grid: Grid,
                    tol: float = DEFAULT_EQUILIBRIUM_TOL) -> List[Equilibrium]:
    """
    Stationary equilibria of l along f(x, u) = x, sorted by l ascending.

    The joint grid is scanned for pairs whose fixed-point residual is within
    one cell's worth of the local Lipschitz bound; local minima of the
    projected-gradient norm seed a bounded trust-region Gauss-Newton solve of
    (f(x,u) - x, projected gradient) = 0. A seed whose solve runs out of
    evaluations is kept unrefined when its own residual is within tol.
    """
    state_grid, control_grid = _search_grids(state_grid, control_grid)
    n = system.n
    d = n + system.m
    spacing = np.concatenate([state_grid.spacing, control_grid.spacing])
    half_diag = 0.5 * float(np.linalg.norm(spacing))

    x = state_grid.nodes[:, None, :]
    u = control_grid.nodes[None, :, :]
    shape = (state_grid.size, control_grid.size)
    z = np.concatenate([np.broadcast_to(x, shape + (n,)), np.broadcast_to(u, shape + (system.m,))], axis=-1)
    z = z.reshape(-1, d)
    z = z[np.asarray(system.in_constraint_set(z[:, :n], z[:, n:]), dtype=bool)]
    residual_fn, cost_fn = _joint_maps(system)
    r = np.linalg.norm(residual_fn(z), axis=-1)

    grad, jac = _batch_derivatives(system, z)
    bound = np.linalg.norm(jac, axis=(1, 2)) * half_diag + tol
    keep = r <= bound
    z, grad, jac = z[keep], grad[keep], jac[keep]
    if z.shape[0] == 0:
        logger.info("no equilibrium candidates on the grid")
        return []
    station = np.linalg.norm(_projected_gradient(grad, jac), axis=-1)

    tree = cKDTree(z / spacing)
    seeds = []
    for i, neigh in enumerate(tree.query_ball_point(z / spacing, r=1.5)):
        others = [j for j in neigh if j != i]
        if len(others) >= 2 and station[i] <= station[others].min():
            seeds.append(i)
    seeds = sorted(seeds, key=lambda i: station[i])[:MAX_SEEDS]
    logger.debug(f"{z.shape[0]} equilibrium candidates, {len(seeds)} seeds")

    box_lo = np.concatenate([system.state_box.lower, system.control_box.lower])
    box_hi = np.concatenate([system.state_box.upper, system.control_box.upper])
    margin = 1e-9 * (box_hi - box_lo)
    F = _stationarity_system(system)

    found: List[Equilibrium] = []
    for i in seeds:
        z0 = np.clip(z[i], box_lo + margin, box_hi - margin)
        try:
            sol = least_squares(F, z0, bounds=(box_lo, box_hi), method="trf",
                                xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=200)
        except ValueError as exc:
            logger.debug(f"seed {z[i].tolist()} refinement failed: {exc}")
            continue
        zs = sol.x
        xs, us = split_pair(zs, n)
        res = float(np.linalg.norm(residual_fn(zs[None, :])[0]))
        stat = float(np.linalg.norm(F(zs)[n:]))
        scale = 1.0 + float(np.linalg.norm(central_gradient(cost_fn, zs))) + abs(float(cost_fn(zs[None, :])[0]))
        if sol.status > 0 and res <= tol and stat <= 1e-6 * scale and bool(system.in_constraint_set(xs, us)):
            found.append(Equilibrium.at(system, xs, us, beta, refined=True))
        elif sol.status <= 0 and float(np.linalg.norm(residual_fn(z[i][None, :])[0])) <= tol:
            xi, ui = split_pair(z[i], n)
            logger.warning(f"equilibrium refinement diverged at {z[i].tolist()}; keeping unrefined grid point")
            found.append(Equilibrium.at(system, xi, ui, beta, refined=False))
        else:
            logger.debug(f"seed {z[i].tolist()} did not refine to an interior stationary equilibrium")

    found.sort(key=lambda e: (not e.refined, e.stage_cost_value))
    unique: List[Equilibrium] = []
    for eq in found:
        ze = np.concatenate([eq.x, eq.u])
        radius = max(tol, 1e-6) * (1.0 + float(np.linalg.norm(ze)))
        if all(np.linalg.norm(ze - np.concatenate([q.x, q.u])) > radius for q in unique):
            unique.append(eq)
    unique.sort(key=lambda e: e.stage_cost_value)
    logger.info(f"found {len(unique)} equilibria: " + ", ".join(
        f"x={np.round(e.x, 6).tolist()} l={e.stage_cost_value:.6g}" for e in unique))
    return unique


def is_manifold_local_minimizer(system: ControlSystem, eq: Equilibrium, step: float = 1e-3) -> bool:
    """l does not decrease along any tangent direction of the equilibrium manifold at eq."""
    residual_fn, cost_fn = _joint_maps(system)
    z = np.concatenate([eq.x, eq.u])
    tangent = null_space(central_jacobian(residual_fn, z))
    t = step * (1.0 + float(np.linalg.norm(z)))
    base = float(cost_fn(z[None, :])[0])
    for k in range(tangent.shape[1]):
        for sign in (-1.0, 1.0):
            probe = z + sign * t * tangent[:, k]
            xp, up = split_pair(probe, system.n)
            if not bool(system.in_constraint_set(xp, up)):
                continue
            if float(cost_fn(probe[None, :])[0]) < base - 1e-12:
                return False
    return True


def select_local_equilibrium(system: ControlSystem, equilibria: Sequence[Equilibrium],
                             anchor: Optional[int] = None) -> int:
    """
    Index of the equilibrium to analyse locally.

    An explicit anchor wins; otherwise the cheapest non-global equilibrium
    that locally minimizes l on the manifold, or the only one there is.
    """
    if not equilibria:
        raise RegionError("no equilibria to anchor the analysis")
    if anchor is not None:
        if not 0 <= anchor < len(equilibria):
            raise RegionError(f"anchor index {anchor} out of range (found {len(equilibria)} equilibria)")
        return anchor
    if len(equilibria) == 1:
        return 0
    for idx in range(1, len(equilibria)):
        if is_manifold_local_minimizer(system, equilibria[idx]):
            return idx
    logger.warning("no non-global local minimizer among the equilibria; anchoring at the global one")
    return 0


# =============================================================================
# STORAGE SYNTHESIS
# =============================================================================

def synthesize_linear_storage(system: ControlSystem, eq: Equilibrium, beta: float,
                              tol: float = 1e-6) -> StorageFunction:
    """
    Least-squares nu for grad_x l + nu (I - beta df/dx) = 0, grad_u l - beta nu df/du = 0.

    Returns lambda(x) = nu . (x - x_eq); a residual above tol means no linear
    storage makes the rotated cost stationary at eq.
    """
    n = system.n
    residual_fn, cost_fn = _joint_maps(system)
    z = np.concatenate([eq.x, eq.u])
    g = central_gradient(cost_fn, z)
    J = central_jacobian(lambda p: system.f(*split_pair(p, n)), z)
    fx, fu = J[:, :n], J[:, n:]
    M = np.hstack([np.eye(n) - beta * fx, -beta * fu])
    nu, *_ = np.linalg.lstsq(M.T, -g, rcond=None)
    residual = float(np.linalg.norm(M.T @ nu + g))
    logger.info(f"linear storage at x={eq.x.tolist()}: nu={nu.tolist()}, residual={residual:.3e}")
    if residual > tol:
        raise StorageSynthesisError(residual)
    return StorageFunction.linear(nu, eq.x, system.state_box, synthesis_residual=residual)


# =============================================================================
# COMPARISON FUNCTIONS
# =============================================================================

def snap_deviations(r) -> Array:
    """Round deviations so sums that differ only by float rounding share one level."""
    return np.round(np.asarray(r, dtype=float), DEVIATION_DECIMALS)


def _grouped(r: Array, v: Array, reducer) -> tuple:
    levels, inverse = np.unique(r, return_inverse=True)
    out = np.full(levels.size, np.inf if reducer is np.minimum else -np.inf)
    reducer.at(out, inverse, v)
    return levels, out


def _strict_breakpoints(r: Array, values: Array) -> ComparisonFunction:
    """
    Prepend (0, 0) and merge breakpoints that rounding left non-increasing.

    A tie moves the last breakpoint out to the larger deviation at its
    earlier value, so the interpolant stays below the merged samples.
    """
    keep_r, keep_v = [0.0], [0.0]
    for ri, vi in zip(r, values):
        if ri <= keep_r[-1]:
            continue
        if vi > keep_v[-1]:
            keep_r.append(float(ri))
            keep_v.append(float(vi))
        elif len(keep_r) > 1:
            keep_r[-1] = float(ri)
    if len(keep_r) < 2:
        raise NotPositiveDefiniteError("comparison fit left no strictly positive breakpoint")
    return ComparisonFunction(breakpoints=keep_r, values=keep_v)


def fit_comparison_lower(deviations: Sequence[float], values: Sequence[float]) -> ComparisonFunction:
    """
    Strictly increasing piecewise-linear alpha below every sample.

    env(r) = min of v over samples with deviation >= r; then
    alpha(r_i) = eps r_i + min_{j >= i}(env(r_j) - eps r_j) with
    eps = (smallest positive env) / (largest r) * 1e-3.
    Deviations are rounded to DEVIATION_DECIMALS before grouping.
    """
    r = snap_deviations(deviations).ravel()
    v = np.asarray(values, dtype=float).ravel()
    if np.any(v < 0):
        raise NotPositiveDefiniteError(f"negative sample value {v.min():.3e}: dissipativity fails")
    positive = r > 0
    r, v = r[positive], v[positive]
    if r.size == 0:
        raise NotPositiveDefiniteError("no samples with positive deviation")
    levels, group_min = _grouped(r, v, np.minimum)
    env = np.minimum.accumulate(group_min[::-1])[::-1]
    if np.any(env <= 0):
        raise NotPositiveDefiniteError("sample value 0 at positive deviation: not positive definite")
    eps = env.min() / levels[-1] * 1e-3
    shifted = np.minimum.accumulate((env - eps * levels)[::-1])[::-1]
    alpha = _strict_breakpoints(levels, eps * levels + shifted)
    excess = float(np.max(alpha(levels) - group_min))
    if excess > FIT_TOL:
        raise NotPositiveDefiniteError(f"comparison fit exceeds a sample by {excess:.3e}")
    return alpha


def fit_comparison_upper(deviations: Sequence[float], values: Sequence[float]) -> ComparisonFunction:
    """
    Strictly increasing piecewise-linear gamma above every sample.

    Mirror of fit_comparison_lower with prefix maxima.
    """
    r = snap_deviations(deviations).ravel()
    v = np.asarray(values, dtype=float).ravel()
    if np.any(v < 0):
        raise NotPositiveDefiniteError(f"negative sample value {v.min():.3e}")
    at_zero = r <= 0
    if np.any(v[at_zero] > 0):
        logger.warning("upper comparison fit ignores positive samples at zero deviation")
    r, v = r[~at_zero], v[~at_zero]
    if r.size == 0:
        raise NotPositiveDefiniteError("no samples with positive deviation")
    levels, group_max = _grouped(r, v, np.maximum)
    env = np.maximum.accumulate(group_max)
    positive_env = env[env > 0]
    eps = (positive_env.min() if positive_env.size else 1.0) / levels[-1] * 1e-3
    lifted = np.maximum.accumulate(env - eps * levels)
    gamma = eps * levels + lifted
    keep_r, keep_v = [0.0], [0.0]
    for ri, gi in zip(levels, gamma):
        gi = max(float(gi), np.nextafter(keep_v[-1], np.inf))
        keep_r.append(float(ri))
        keep_v.append(gi)
    return ComparisonFunction(breakpoints=keep_r, values=keep_v)


# =============================================================================
# VERIFICATION
# =============================================================================

def _pair_deviation(x: Array, u: Array, eq: Equilibrium, variant: DissipativityVariant) -> Array:
    dx = np.linalg.norm(x - eq.x, axis=-1)
    if variant == DissipativityVariant.X_ONLY:
        return dx
    return dx + np.linalg.norm(u - eq.u, axis=-1)


def rotated_cost_minimum(problem: DiscountedProblem, eq: Equilibrium, storage: StorageFunction,
                         control_grid: Grid, state_nodes: int = 201):
    """inf of l~ over all admissible pairs: grid search over X x U, then a bounded polish."""
    system = problem.system
    sgrid = Grid.uniform(system.state_box, state_nodes)
    x = sgrid.nodes[:, None, :]
    u = control_grid.nodes[None, :, :]
    adm = system.admissible(x, u)
    values = np.broadcast_to(rotated_cost_values(problem, eq, storage, x, u), adm.shape)
    masked = np.where(adm, values, np.inf)
    i, j = np.unravel_index(int(np.argmin(masked)), masked.shape)
    best_value = float(masked[i, j])
    best = np.concatenate([sgrid.nodes[i], control_grid.nodes[j]])

    eq_value = float(rotated_cost_values(problem, eq, storage, eq.x, eq.u))
    if bool(system.admissible(eq.x, eq.u)) and eq_value < best_value:
        best_value, best = eq_value, np.concatenate([eq.x, eq.u])

    n = system.n
    ceiling = float(np.max(values[adm])) + 1.0

    def objective(zv: Array) -> float:
        xv, uv = split_pair(zv, n)
        if not bool(system.admissible(xv, uv)):
            return ceiling
        return float(rotated_cost_values(problem, eq, storage, xv, uv))

    bounds = list(zip(np.concatenate([system.state_box.lower, system.control_box.lower]),
                      np.concatenate([system.state_box.upper, system.control_box.upper])))
    polished = minimize(objective, best, method="Powell", bounds=bounds,
                        options={"xtol": 1e-12, "ftol": 1e-14, "maxfev": 4000})
    if polished.fun < best_value:
        best_value, best = float(polished.fun), np.asarray(polished.x, dtype=float)
    return best_value, best


def verify_dissipativity(problem: DiscountedProblem, eq: Equilibrium, storage: StorageFunction,
                         region: Box, variant: DissipativityVariant = DissipativityVariant.XU,
                         state_nodes: int = 201, control_nodes: int = 201,
                         zero_tol: float = 1e-12) -> DissipativityReport:
    """
    Grid check of l~(x, u) >= alpha(deviation) on region x U.

    Only pairs with f(x, u) in X are checked. The certificate is accepted iff
    l~ >= -zero_tol everywhere and |l~| <= zero_tol happens only within one
    cell of the equilibrium. alpha is fitted on, and the margin taken over,
    every admissible pair unless some pair inside that cell has |l~| <= zero_tol;
    then both skip the cell and margin_excludes_cell is set.
    inf l~ over all of Y is recorded separately.
    """
    system = problem.system
    if not system.state_box.contains_box(region):
        raise RegionError(f"region {region.intervals()} is not inside the state box")
    sgrid = Grid.uniform(region, state_nodes)
    cgrid = Grid.uniform(system.control_box, control_nodes)
    x = sgrid.nodes[:, None, :]
    u = cgrid.nodes[None, :, :]
    adm = system.admissible(x, u)
    ell_tilde = np.broadcast_to(rotated_cost_values(problem, eq, storage, x, u), adm.shape)
    deviation = snap_deviations(np.broadcast_to(_pair_deviation(x, u, eq, variant), adm.shape))
    if variant == DissipativityVariant.X_ONLY:
        cell = float(np.linalg.norm(sgrid.spacing))
    else:
        cell = float(np.linalg.norm(np.concatenate([sgrid.spacing, cgrid.spacing])))

    negative = adm & (ell_tilde < -zero_tol)
    flat = adm & (np.abs(ell_tilde) <= zero_tol) & (deviation > cell)
    bad = negative | flat
    outside = adm & (deviation > cell)
    accepted = not bool(bad.any())

    ell_min, argmin = rotated_cost_minimum(problem, eq, storage, cgrid, state_nodes)

    positivity = float(np.min(ell_tilde[outside])) if outside.any() else 0.0
    breakpoints: List[float] = []
    alpha_values: List[float] = []
    excludes_cell = False
    if accepted:
        inner = adm & (deviation > 0) & (deviation <= cell)
        excludes_cell = bool(np.any(ell_tilde[inner] <= zero_tol))
        samples = outside if excludes_cell else adm & (deviation > 0)
        if not samples.any():
            raise RegionError("verification grid has no pairs to fit a comparison function on")
        alpha = fit_comparison_lower(deviation[samples], ell_tilde[samples])
        scope = outside if excludes_cell else adm
        margin = float(np.min(ell_tilde[scope] - alpha(deviation[scope])))
        breakpoints, alpha_values = alpha.breakpoints, alpha.values
    else:
        margin = float(np.min(ell_tilde[bad]))

    bad_idx = np.argwhere(bad)
    order = np.argsort(ell_tilde[bad], kind="stable")[:LISTED_VIOLATIONS]
    violations = [
        np.concatenate([sgrid.nodes[i], cgrid.nodes[j]]).tolist() for i, j in bad_idx[order]
    ]
    report = DissipativityReport(
        variant=variant,
        beta=problem.beta,
        region=region.intervals(),
        accepted=accepted,
        margin=margin,
        margin_excludes_cell=excludes_cell,
        positivity_margin=positivity,
        ell_tilde_min=ell_min,
        ell_tilde_argmin=argmin.tolist(),
        alpha_breakpoints=breakpoints,
        alpha_values=alpha_values,
        violations=violations,
        violation_count=int(bad.sum()),
        cell_radius=cell,
        checked_pairs=int(adm.sum()),
    )
    logger.info(
        f"dissipativity ({variant.value}) beta={problem.beta:g} on {region.intervals()}: "
        f"{'accepted' if accepted else 'rejected'}, margin={margin:.3e}, "
        f"violations={report.violation_count}, ell_tilde_min={ell_min:.6g}"
    )
    return report


def default_region(system: ControlSystem, equilibria: Sequence[Equilibrium], index: int) -> Box:
    """
    Box around equilibria[index] reaching half way to the nearest other
    equilibrium, clipped to the state box; the whole state box when alone.
    """
    eq = equilibria[index]
    others = [np.linalg.norm(e.x - eq.x) for j, e in enumerate(equilibria) if j != index]
    others = [d for d in others if d > 0]
    if not others:
        return system.state_box
    return Box.around(eq.x, 0.5 * min(others)).intersect(system.state_box)
