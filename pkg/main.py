#!/usr/bin/env python3
"""
D.I.S.C.O. - Discounted Infinite-horizon Stability & Control Optimizer
Main Entry Point - command-line front end

Subcommands: solve, rollout, equilibria, dissipativity, turnpike,
thresholds, scan, reproduce. Every command writes its artifacts, a
meta.json with the resolved configuration and a run.log into --out.
"""

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError
from rich.box import ROUNDED
from rich.console import Console
from rich.panel import Panel
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn
from rich.table import Table

from core.dissipativity import (
    default_region,
    find_equilibria,
    select_local_equilibrium,
    synthesize_linear_storage,
    verify_dissipativity,
)
from core.errors import ConfigError, DiscoError, StorageSynthesisError
from core.grid_dp import extract_policy, rollout, value_iteration
from core.model import Box, CostSpec, Equilibrium, parse_storage
from core.orchestrator import Setting, ThresholdOrchestrator, build_setting
from core.schemas import DissipativityReport, DissipativityVariant, RolloutMode, RunConfig
from core.turnpike import (
    beta_scan,
    classify_terminal,
    estimate_C,
    estimate_beta_one,
    lyapunov_decrease_check,
    minimizing_equilibria,
    q_set,
    rotated_value_function,
    suboptimality_gap,
)
from data.examples import example_model, get_reproduction_plan, resolve_config
from utils.export import (
    ensure_dir,
    plot_trajectories_svg,
    plot_value_function_svg,
    scan_frame,
    write_frame,
    write_json,
    write_meta,
)
from utils.logger import file_log, get_logger, setup_logging

logger = get_logger("disco")

# argparse dest -> RunConfig field
FLAG_FIELDS = {
    "example": "example",
    "beta": "beta",
    "beta_grid": "beta_grid",
    "x0": "x0",
    "grid": "grid",
    "ugrid": "ugrid",
    "tol": "tol",
    "max_iter": "max_iter",
    "horizon": "horizon",
    "rho": "rho",
    "k": "k_fraction",
    "K": "K",
    "storage": "storage",
    "region": "region",
    "variant": "variant",
    "eps": "epsilon",
    "M": "M",
    "anchor": "anchor",
    "workers": "workers",
    "mode": "mode",
    "refine": "refine",
    "verify_nodes": "verify_nodes",
    "classify_tol": "classify_tol",
    "out": "out",
}


# =============================================================================
# ARGUMENT PARSING
# =============================================================================

def beta_grid_arg(text: str) -> List[float]:
    """A:B:STEP, both ends included."""
    try:
        a, b, step = (float(p) for p in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A:B:STEP, got '{text}'")
    if step <= 0 or b < a:
        raise argparse.ArgumentTypeError("need STEP > 0 and B >= A")
    count = int(round((b - a) / step)) + 1
    return [float(v) for v in np.round(a + step * np.arange(count), 12)]


def x0_arg(text: str) -> List[List[float]]:
    """Initial states separated by ',', coordinates of one state by ';'."""
    try:
        return [[float(c) for c in state.split(";")] for state in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse initial states '{text}'")


def region_arg(text: str) -> List[Tuple[float, float]]:
    """A:B per axis, axes separated by ','."""
    try:
        intervals = [tuple(float(p) for p in axis.split(":")) for axis in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse region '{text}'")
    if any(len(iv) != 2 for iv in intervals):
        raise argparse.ArgumentTypeError("region axes must be A:B")
    return intervals


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--example", type=int, choices=[1, 2, 3], help="Builtin example preset")
    common.add_argument("--config", help="JSON file mirroring RunConfig; flags override its fields")
    common.add_argument("--beta", type=float, help="Discount factor in (0, 1)")
    common.add_argument("--beta-grid", type=beta_grid_arg, help="Discount factors A:B:STEP")
    common.add_argument("--gamma", type=float, help="Weight of gamma*|u| (example 2, polynomial models)")
    common.add_argument("--x0", type=x0_arg, help="Initial states F[,F...] (use --x0=-0.8,-0.5 for negatives)")
    common.add_argument("--grid", type=int, help="State nodes per axis")
    common.add_argument("--ugrid", type=int, help="Control nodes per axis")
    common.add_argument("--tol", type=float, help="Value iteration tolerance")
    common.add_argument("--max-iter", type=int, help="Value iteration sweep limit")
    common.add_argument("--horizon", type=int, help="Closed-loop steps")
    common.add_argument("--rho", type=float, help="Neighbourhood radius of the threshold analysis")
    common.add_argument("--k", type=int, help="Fraction parameter k of beta*")
    common.add_argument("--K", type=int, help="Stay horizon of sigma/eps/theta")
    common.add_argument("--storage", help="auto | zero | linear:NU | quadratic:C | tabulated:PATH")
    common.add_argument("--region", type=region_arg, help="Analysis region A:B[,A:B] (use --region=A:B)")
    common.add_argument("--variant", choices=[v.value for v in DissipativityVariant])
    common.add_argument("--eps", type=float, help="Q-set radius")
    common.add_argument("--M", type=int, help="Q-set horizon")
    common.add_argument("--anchor", type=int, help="Index of the equilibrium to analyse")
    common.add_argument("--workers", type=int, help="Worker threads")
    common.add_argument("--mode", choices=[m.value for m in RolloutMode], help="Rollout control lookup")
    common.add_argument("--refine", action="store_true", default=None, help="Refine 1-D argmin controls")
    common.add_argument("--verify-nodes", type=int, help="Nodes per axis of the dissipativity grid")
    common.add_argument("--classify-tol", type=float, help="Terminal classification tolerance")
    common.add_argument("--out", help="Output directory (default runs/<command>)")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    common.add_argument("-q", "--quiet", action="store_true", help="Warnings only")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="disco",
        description="D.I.S.C.O. - discounted infinite-horizon optimal control on grids",
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_options()
    helps = {
        "solve": "Value iteration: V.csv and policy.csv",
        "rollout": "Closed-loop trajectories from --x0",
        "equilibria": "Equilibria and the synthesized linear storage",
        "dissipativity": "Grid certificate of local strict dissipativity (--beta-grid to sweep)",
        "turnpike": "Q-sets, C-bound and Lyapunov decrease along optimal rollouts",
        "thresholds": "Full threshold pipeline report",
        "scan": "Classify long-run behaviour over --beta-grid x --x0",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, allow_abbrev=False)
    reproduce = sub.add_parser("reproduce", parents=[common], help="Preset figure-data bundles",
                               allow_abbrev=False)
    reproduce.add_argument("example_id", type=int, choices=[1, 2, 3])
    return parser


def build_config(args: argparse.Namespace) -> RunConfig:
    """Config file, then flags, then example presets."""
    data: Dict[str, Any] = {}
    if args.config:
        path = Path(args.config)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    for flag, field_name in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[field_name] = value
    if args.command == "reproduce":
        data["example"] = args.example_id
    data.setdefault("out", str(Path("runs") / args.command))
    config = RunConfig.model_validate(data)
    return resolve_config(config, gamma=args.gamma)


# =============================================================================
# CONSOLE
# =============================================================================

class DiscoConsole:
    """Rich console output of the D.I.S.C.O. commands."""

    def __init__(self, quiet: bool = False):
        self.console = Console(quiet=quiet)

    def print(self, *args, **kwargs):
        self.console.print(*args, **kwargs)

    def print_header(self, command: str, config: RunConfig):
        model = config.model.kind.value if config.model else "-"
        beta = f"{config.beta:g}" if config.beta is not None else "-"
        self.console.print(Panel(
            f"[bold white]{command}[/]  model [cyan]{model}[/]  beta [cyan]{beta}[/]  "
            f"grid [cyan]{config.grid}[/] x [cyan]{config.ugrid}[/]",
            title="[bold]D.I.S.C.O.[/]",
            border_style="blue",
            box=ROUNDED,
        ))

    def print_table(self, title: str, columns: Sequence[str], rows: Sequence[Sequence[Any]]):
        table = Table(title=title, box=ROUNDED, border_style="blue")
        for i, column in enumerate(columns):
            table.add_column(column, style="cyan" if i == 0 else "green", justify="left" if i == 0 else "right")
        for row in rows:
            table.add_row(*[_fmt(v) for v in row])
        self.console.print(table)

    def print_done(self, out: Path):
        self.console.print(f"[bold green]done[/] - artifacts in [cyan]{out}[/]")

    def print_error(self, error: BaseException, exit_code: int):
        hint = getattr(error, "hint", None)
        body = f"[bold red]{getattr(error, 'message', str(error))}[/]"
        if hint:
            body += f"\n[yellow]hint:[/] {hint}"
        self.console.print(Panel(body, title=f"[bold red]error (exit {exit_code})[/]", border_style="red"))


def _fmt(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6g}"
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    return str(value)


# =============================================================================
# SHARED STEPS
# =============================================================================

def _x0_list(config: RunConfig) -> List[List[float]]:
    if not config.x0:
        raise ConfigError("no initial state given", hint="pass --x0")
    return config.x0


def _solve(setting: Setting, config: RunConfig, cost: Optional[CostSpec] = None):
    V = value_iteration(setting.problem, setting.state_grid, setting.control_grid, cost or CostSpec.original(),
                        tol=config.tol, max_iter=config.max_iter, workers=config.workers)
    return V, extract_policy(V, setting.problem, setting.control_grid)


def _anchor(setting: Setting, config: RunConfig):
    """Equilibria, anchored index and the anchored equilibrium."""
    equilibria = find_equilibria(setting.system, setting.problem.beta, setting.state_grid, setting.control_grid)
    index = select_local_equilibrium(setting.system, equilibria, config.anchor)
    return equilibria, index, equilibria[index]


def _storage(setting: Setting, config: RunConfig, eq: Equilibrium):
    storage = parse_storage(config.storage, eq.x, setting.system.state_box)
    if storage is None:
        storage = synthesize_linear_storage(setting.system, eq, setting.problem.beta)
    return storage


def _region(setting: Setting, config: RunConfig, equilibria, index: int) -> Box:
    if config.region is not None:
        return Box.from_intervals(config.region)
    return default_region(setting.system, equilibria, index)


def _equilibrium_lines(equilibria) -> List[Tuple[str, float]]:
    return [(f"x_eq{j}", float(e.x[0])) for j, e in enumerate(equilibria)]


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_solve(config: RunConfig, out: Path, console: DiscoConsole) -> None:
    setting = build_setting(config)
    V, policy = _solve(setting, config)
    V.write_csv(out / "V.csv")
    policy.write_csv(out / "policy.csv")
    if setting.system.n == 1:
        plot_value_function_svg(out / "V.svg", V.grid.nodes, V.values,
                                title=f"{setting.system.name}, beta={setting.problem.beta:g}")
    write_meta(out, "solve", config, {"iterations": V.iterations, "bellman_residual": V.bellman_residual})
    console.print_table("Value iteration", ["quantity", "value"], [
        ("sweeps", V.iterations),
        ("fixed-point bound", V.bellman_residual),
        ("tolerance", config.tol),
        ("min V", float(V.values.min())),
        ("max V", float(V.values.max())),
    ])


def cmd_rollout(config: RunConfig, out: Path, console: DiscoConsole) -> None:
    setting = build_setting(config)
    V, policy = _solve(setting, config)
    equilibria = find_equilibria(setting.system, setting.problem.beta, setting.state_grid, setting.control_grid)
    targets = minimizing_equilibria(setting.system, equilibria)
    runs, series, rows = [], [], []
    for i, x0 in enumerate(_x0_list(config)):
        traj = rollout(policy, setting.problem, x0, config.horizon, mode=config.mode, refine=config.refine)
        traj.write_csv(out / f"trajectory_{i}.csv")
        label, idx, steps = classify_terminal(traj.states, equilibria, setting.system.state_box,
                                              tol=config.classify_tol, targets=targets)
        runs.append({
            "x0": x0, "terminal_x": traj.terminal.tolist(), "class": label.value, "equilibrium": idx,
            "steps_to_target": steps, "cost": traj.cost, "exited": traj.exited,
        })
        series.append((f"x0={_fmt(x0)}", traj.states))
        rows.append((_fmt(x0), traj.terminal.tolist(), label.value, steps, traj.cost))
    if setting.system.n == 1:
        plot_trajectories_svg(out / "trajectories.svg", series, title=f"beta={setting.problem.beta:g}",
                              hlines=_equilibrium_lines(equilibria))
    write_json(out / "rollout.json", {"beta": setting.problem.beta, "runs": runs,
                                      "equilibria": [e.to_record().model_dump() for e in equilibria]})
    write_meta(out, "rollout", config, {"iterations": V.iterations, "bellman_residual": V.bellman_residual})
    console.print_table("Closed-loop rollouts", ["x0", "terminal", "class", "steps", "cost"], rows)


def cmd_equilibria(config: RunConfig, out: Path, console: DiscoConsole) -> None:
    setting = build_setting(config)
    equilibria, index, eq = _anchor(setting, config)
    document: Dict[str, Any] = {
        "beta": setting.problem.beta,
        "equilibria": [e.to_record().model_dump() for e in equilibria],
        "local_index": index,
        "storage": None,
        "storage_error": None,
    }
    try:
        document["storage"] = synthesize_linear_storage(setting.system, eq, setting.problem.beta) \
            .to_record().model_dump(mode="json")
    except StorageSynthesisError as exc:
        document["storage_error"] = str(exc)
        logger.warning(str(exc))
    write_json(out / "equilibria.json", document)
    write_meta(out, "equilibria", config)
    console.print_table("Equilibria (sorted by stage cost)", ["#", "x", "u", "l(x,u)", "anchor"], [
        (j, e.x.tolist(), e.u.tolist(), e.stage_cost_value, j == index) for j, e in enumerate(equilibria)
    ])
    storage = document["storage"]
    console.print(f"linear storage nu = {_fmt(storage['coefficients']) if storage else document['storage_error']}")


def cmd_dissipativity(config: RunConfig, out: Path, console: DiscoConsole) -> None:
    betas = config.beta_grid or [config.beta]
    setting = build_setting(config, betas[0])
    equilibria, index, eq = _anchor(setting, config)
    region = _region(setting, config, equilibria, index)
    reports: List[DissipativityReport] = []
    for beta in betas:
        current = build_setting(config, beta)
        eq_beta = Equilibrium.at(current.system, eq.x, eq.u, beta, eq.refined)
        storage = _storage(current, config, eq_beta)
        reports.append(verify_dissipativity(current.problem, eq_beta, storage, region, variant=config.variant,
                                            state_nodes=config.verify_nodes, control_nodes=config.verify_nodes))
    if len(reports) == 1:
        write_json(out / "dissipativity.json", reports[0])
    else:
        frame = pd.DataFrame([{
            "beta": r.beta, "accepted": r.accepted, "margin": r.margin,
            "positivity_margin": r.positivity_margin, "ell_tilde_min": r.ell_tilde_min,
            "violation_count": r.violation_count,
        } for r in reports])
        write_frame(out / "dissipativity_scan.csv", frame)
        flips = [b.beta for a, b in zip(reports[:-1], reports[1:]) if a.accepted != b.accepted]
        write_json(out / "dissipativity.json", {
            "flips": flips,
            "reports": [r.model_dump(mode="json") for r in reports],
        })
    write_meta(out, "dissipativity", config, {"equilibrium": eq.to_record().model_dump()})
    console.print_table(f"Dissipativity ({config.variant.value}) on {region.intervals()}",
                        ["beta", "accepted", "margin", "ell_tilde_min", "violations"],
                        [(r.beta, r.accepted, r.margin, r.ell_tilde_min, r.violation_count) for r in reports])


def cmd_turnpike(config: RunConfig, out: Path, console: DiscoConsole) -> None:
    setting = build_setting(config)
    problem = setting.problem
    equilibria, index, eq = _anchor(setting, config)
    storage = _storage(setting, config, eq)
    region = _region(setting, config, equilibria, index)
    V, policy = _solve(setting, config)
    V_rot = rotated_value_function(problem, eq, storage, setting.state_grid, setting.control_grid,
                                   config.tol, config.max_iter, config.workers)
    M = config.M if config.M is not None else config.horizon
    steps = max(config.horizon, M)

    c_bound = None
    annulus = (2.0 * V_rot.grid.cell_diameter, region.inner_radius(eq.x))
    try:
        c_bound = estimate_C(V_rot, problem, eq, storage, annulus, setting.control_grid)
    except DiscoError as exc:
        logger.warning(f"C-bound skipped: {exc}")

    runs, rows, series = [], [], []
    for i, x0 in enumerate(_x0_list(config)):
        traj = rollout(policy, problem, x0, steps, mode=config.mode, refine=config.refine)
        traj.write_csv(out / f"trajectory_{i}.csv")
        entry: Dict[str, Any] = {"x0": x0, "terminal_x": traj.terminal.tolist(), "q_set": None,
                                 "lyapunov": None, "suboptimality_gap": suboptimality_gap(traj, V)}
        if traj.states.shape[0] >= M + 1:
            entry["q_set"] = q_set(traj, eq.x, config.epsilon, M).model_dump()
        else:
            logger.warning(f"rollout from {x0} stopped after {traj.N} steps; no Q-set for M={M}")
        if c_bound is not None:
            entry["lyapunov"] = lyapunov_decrease_check(V_rot, problem, eq, storage, traj, c_bound.C).model_dump()
        runs.append(entry)
        series.append((f"x0={_fmt(x0)}", traj.states))
        rows.append((_fmt(x0), traj.terminal.tolist(),
                     entry["q_set"]["cardinality"] if entry["q_set"] else None,
                     entry["lyapunov"]["passed"] if entry["lyapunov"] else None))

    document: Dict[str, Any] = {
        "beta": problem.beta,
        "equilibrium": eq.to_record().model_dump(),
        "storage": storage.to_record().model_dump(mode="json"),
        "epsilon": config.epsilon,
        "M": M,
        "c_bound": c_bound.model_dump() if c_bound else None,
        "runs": runs,
    }
    if config.beta_grid:
        estimate = estimate_beta_one(
            setting.system, eq, lambda b: _storage(build_setting(config, b), config, eq),
            config.beta_grid, setting.state_grid, setting.control_grid, annulus, config.tol, config.max_iter,
        )
        document["beta_one"] = estimate.model_dump()
    write_json(out / "turnpike.json", document)
    if setting.system.n == 1:
        plot_trajectories_svg(out / "trajectories.svg", series, title=f"beta={problem.beta:g}",
                              hlines=[("anchor", float(eq.x[0]))])
    write_meta(out, "turnpike", config)
    if c_bound is not None:
        console.print(f"C = {c_bound.C:.6g}, 1/(1-beta) = {c_bound.bound:.6g}, kappa = {c_bound.kappa:.4g}")
    console.print_table(f"Turnpike at x={_fmt(eq.x.tolist())} (eps={config.epsilon:g}, M={M})",
                        ["x0", "terminal", "#Q", "Lyapunov decrease"], rows)


def cmd_thresholds(config: RunConfig, out: Path, console: DiscoConsole) -> None:
    orchestrator = ThresholdOrchestrator(verbose=True)
    report = orchestrator.analyze(config)
    ctx = orchestrator.context
    write_json(out / "thresholds.json", report)
    write_json(out / "dissipativity.json", ctx["dissipativity"])
    ctx["value_function"].write_csv(out / "V_rot.csv")
    write_meta(out, "thresholds", config)
    console.print_table("Threshold report", ["quantity", "value", "provenance"], [
        ("x_l", report.equilibrium.x, report.provenance.get("equilibrium")),
        ("storage", report.storage.coefficients, report.provenance.get("storage")),
        ("ell_tilde_min", report.ell_tilde_min, report.provenance.get("ell_tilde_min")),
        ("rho", report.rho, report.provenance.get("rho")),
        ("eta", report.eta, report.provenance.get("eta")),
        ("delta", report.delta, report.provenance.get("delta")),
        (f"beta* (k={report.k_fraction})", report.beta_star, report.provenance.get("beta_star")),
        ("beta* (k=1)", report.beta_star_half, None),
        ("beta* (k->inf)", report.beta_star_limit, None),
        ("sigma", report.sigma, report.provenance.get("sigma")),
        ("eps_stay", report.eps_stay, report.provenance.get("eps_stay")),
        ("theta_stay", report.theta_stay, None),
        ("theta (K=1)", report.theta_one, report.provenance.get("theta_one")),
        ("dissipativity margin", report.dissipativity_margin, None),
        ("C", report.c_bound.C if report.c_bound else None, None),
    ])


def cmd_scan(config: RunConfig, out: Path, console: DiscoConsole) -> None:
    betas = config.beta_grid or ([config.beta] if config.beta is not None else None)
    if not betas:
        raise ConfigError("scan needs discount factors", hint="pass --beta-grid A:B:STEP")
    with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), BarColumn(),
                  TextColumn("{task.completed}/{task.total}"), console=console.console,
                  transient=True) as progress:
        task = progress.add_task("[cyan]scanning discount factors...", total=len(betas))
        table = beta_scan(
            config.model, _x0_list(config), betas, horizon=config.horizon, state_nodes=config.grid,
            control_nodes=config.ugrid, tol=config.tol, max_iter=config.max_iter,
            classify_tol=config.classify_tol, workers=config.workers, mode=config.mode,
            refine=config.refine, anchor=config.anchor,
            progress=lambda beta: progress.advance(task),
        )
    write_frame(out / "scan.csv", scan_frame(table))
    write_json(out / "scan.json", table)
    write_meta(out, "scan", config, {"beta_hat_2": table.beta_hat_2})
    console.print_table("Scan", ["beta", "x0", "class", "terminal x", "steps"], [
        (c.beta, c.x0, c.label.value, c.terminal_x, c.steps_to_target) for c in table.cells
    ])
    console.print(f"empirical local threshold beta_hat_2 = {_fmt(table.beta_hat_2)}")


def cmd_reproduce(config: RunConfig, out: Path, console: DiscoConsole, gamma: Optional[float] = None) -> None:
    example = config.example
    plan = get_reproduction_plan(example, gamma)
    base = config
    M = base.M if base.M is not None else base.horizon

    keys = sorted({(run.gamma, run.beta) for run in plan.runs}, key=lambda k: (k[0] or 0.0, k[1]))

    def solve(key):
        run_gamma, beta = key
        run_config = base.model_copy(update={"model": example_model(example, run_gamma)}) \
            if run_gamma is not None else base
        setting = build_setting(run_config, beta)
        _, policy = _solve(setting, run_config)
        return key, (setting, policy)

    if config.workers > 1 and len(keys) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            solved = dict(pool.map(solve, keys))
        logger.info(f"solved {len(keys)} problems on {config.workers} workers")
    else:
        solved = dict(solve(k) for k in keys)

    equilibria_by_gamma: Dict[Optional[float], list] = {}
    targets_by_gamma: Dict[Optional[float], List[int]] = {}
    records, by_group = [], {}
    runs_dir = ensure_dir(out / "runs")
    for run in plan.runs:
        setting, policy = solved[(run.gamma, run.beta)]
        if run.gamma not in equilibria_by_gamma:
            equilibria_by_gamma[run.gamma] = find_equilibria(setting.system, run.beta, setting.state_grid,
                                                             setting.control_grid)
            targets_by_gamma[run.gamma] = minimizing_equilibria(setting.system, equilibria_by_gamma[run.gamma])
        equilibria = equilibria_by_gamma[run.gamma]
        targets = targets_by_gamma[run.gamma]
        traj = rollout(policy, setting.problem, run.x0, base.horizon, mode=base.mode, refine=base.refine)
        slug = run.label.replace("=", "").replace(",", "_")
        traj.write_csv(runs_dir / f"{slug}.csv")
        label, idx, steps = classify_terminal(traj.states, equilibria, setting.system.state_box,
                                              tol=base.classify_tol, targets=targets)
        x0 = np.asarray(run.x0, dtype=float)
        records.append({
            "label": run.label, "group": run.group, "beta": run.beta, "gamma": run.gamma,
            "x0": list(run.x0), "class": label.value, "equilibrium": idx,
            "terminal_x": traj.terminal.tolist(), "steps_to_target": steps,
            "max_excursion": float(np.max(np.linalg.norm(traj.states - x0, axis=-1))),
            "q_set_cardinality": q_set(traj, equilibria[0].x, base.epsilon, M).cardinality
            if equilibria and traj.states.shape[0] >= M + 1 else None,
        })
        by_group.setdefault(run.group, []).append((run.label, traj.states, equilibria))

    for group, entries in by_group.items():
        plot_trajectories_svg(out / f"{group}.svg", [(label, states) for label, states, _ in entries],
                              title=f"example {example}: {group}", hlines=_equilibrium_lines(entries[0][2]))
    write_json(out / "classification.json", {"example": example, "runs": records})
    write_meta(out, "reproduce", config, {"example": example, "gamma": gamma})
    console.print_table(f"Example {example} reproduction", ["run", "class", "terminal x", "steps", "max excursion"], [
        (r["label"], r["class"], r["terminal_x"], r["steps_to_target"], r["max_excursion"]) for r in records
    ])


HANDLERS = {
    "solve": cmd_solve,
    "rollout": cmd_rollout,
    "equilibria": cmd_equilibria,
    "dissipativity": cmd_dissipativity,
    "turnpike": cmd_turnpike,
    "thresholds": cmd_thresholds,
    "scan": cmd_scan,
}


# =============================================================================
# ENTRY POINT
# =============================================================================

def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; returns 0 on success, 1 on computation failure, 2 on config errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    setup_logging(verbose=args.verbose, quiet=args.quiet)
    console = DiscoConsole(quiet=args.quiet)
    try:
        config = build_config(args)
        out = ensure_dir(config.out)
        console.print_header(args.command, config)
        with file_log(out / "run.log"):
            logger.info(f"command {args.command}, output {out}")
            if args.command == "reproduce":
                cmd_reproduce(config, out, console, gamma=args.gamma)
            else:
                HANDLERS[args.command](config, out, console)
        console.print_done(out)
        return 0
    except ValidationError as exc:
        console.print_error(ConfigError(f"invalid configuration: {exc}"), 2)
        return 2
    except DiscoError as exc:
        logger.debug("failure details", exc_info=True)
        console.print_error(exc, exc.exit_code)
        return exc.exit_code
    except OSError as exc:
        console.print_error(ConfigError(f"cannot write output: {exc}"), 2)
        return 2


if __name__ == "__main__":
    sys.exit(main())
