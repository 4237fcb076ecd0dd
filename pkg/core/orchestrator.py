"""
D.I.S.C.O. Orchestrator

Coordinates the stages of the threshold pipeline:
equilibria -> storage -> dissipativity -> rotated value function ->
thresholds -> diagnostics.
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional

from core.errors import ConfigError, StageError
from core.grid_dp import Grid
from core.model import ControlSystem, DiscountedProblem, expand_model_spec
from core.schemas import RunConfig, ThresholdReport
from stages import (
    BaseStage,
    DiagnosticsStage,
    DissipativityStage,
    EquilibriumStage,
    StorageStage,
    ThresholdStage,
    ValueFunctionStage,
)
from utils.logger import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class Setting:
    """System, discounted problem and grids resolved from a RunConfig."""
    system: ControlSystem
    problem: DiscountedProblem
    state_grid: Grid
    control_grid: Grid


def build_setting(config: RunConfig, beta: Optional[float] = None) -> Setting:
    """Expand the model of a resolved config on its grids at beta (default config.beta)."""
    if config.model is None:
        raise ConfigError("no model given", hint="pass --example or a --config with a model")
    beta = config.beta if beta is None else beta
    if beta is None:
        raise ConfigError("no discount factor given", hint="pass --beta")
    if config.grid is None or config.ugrid is None:
        raise ConfigError("grid resolutions missing", hint="pass --grid and --ugrid")
    system = expand_model_spec(config.model)
    return Setting(
        system=system,
        problem=DiscountedProblem(system, beta),
        state_grid=Grid.uniform(system.state_box, config.grid),
        control_grid=Grid.uniform(system.control_box, config.ugrid),
    )


class ThresholdOrchestrator:
    """
    D.I.S.C.O. Orchestrator - runs the threshold pipeline end to end.

    ┌──────────────────────────────────────────────────────────────────┐
    │ CONFIG → [Equil] → [Storage] → [Diss] → [V~] → [Thresh] → [Diag] │
    └──────────────────────────────────────────────────────────────────┘

    Every stage adds entries to a shared context. A failing stage stops the
    pipeline with a StageError naming it, except diagnostics, whose failure
    only drops the optional report fields.

    Usage:
        orchestrator = ThresholdOrchestrator()
        report = orchestrator.analyze(resolved_config)
    """

    STAGE_SEQUENCE = [
        ("equilibria", "Equilibrium search"),
        ("storage", "Storage function"),
        ("dissipativity", "Dissipativity certificate"),
        ("value-function", "Rotated value function"),
        ("thresholds", "Threshold quantities"),
        ("diagnostics", "Turnpike diagnostics"),
    ]

    def __init__(self, verbose: bool = True):
        self.verbose = verbose
        self.stages: List[BaseStage] = [
            EquilibriumStage(verbose=verbose),
            StorageStage(verbose=verbose),
            DissipativityStage(verbose=verbose),
            ValueFunctionStage(verbose=verbose),
            ThresholdStage(verbose=verbose),
            DiagnosticsStage(verbose=verbose),
        ]
        self.context: Dict[str, Any] = {}

    def _print_header(self, text: str) -> None:
        if self.verbose:
            width = 70
            logger.info("=" * width)
            logger.info(f"D.I.S.C.O. | {text}")
            logger.info("=" * width)

    def _print_section(self, step: int, total: int, title: str) -> None:
        if self.verbose:
            logger.info("-" * 50)
            logger.info(f"Step {step}/{total}: {title}")
            logger.info("-" * 50)

    def _print_pipeline(self, current_step: int) -> None:
        if not self.verbose:
            return
        parts = []
        for i, stage in enumerate(self.stages):
            if i < current_step:
                parts.append(f"[OK {stage.label}]")
            elif i == current_step:
                parts.append(f"[>> {stage.label}]")
            else:
                parts.append(f"[-- {stage.label}]")
        logger.info("Pipeline: " + " -> ".join(parts))

    def analyze(self, config: RunConfig) -> ThresholdReport:
        """
        Run every stage on a resolved configuration.

        Args:
            config: RunConfig with model, beta and grids filled in

        Returns:
            ThresholdReport with provenance for each derived quantity
        """
        setting = build_setting(config)
        self.context = {
            "config": config,
            "system": setting.system,
            "problem": setting.problem,
            "state_grid": setting.state_grid,
            "control_grid": setting.control_grid,
        }
        provenance: Dict[str, str] = {
            "model": setting.system.name,
            "grids": f"{setting.state_grid.shape} state nodes, {setting.control_grid.shape} control nodes",
        }

        self._print_header(f"Threshold pipeline for {setting.system.name} at beta={setting.problem.beta:g}")
        total = len(self.stages)
        for step, stage in enumerate(self.stages):
            self._print_pipeline(step)
            self._print_section(step + 1, total, self.STAGE_SEQUENCE[step][1])
            response = stage.process(self.context)
            if not response.success:
                if isinstance(stage, DiagnosticsStage):
                    logger.warning(f"diagnostics failed, continuing without them: {response.error_message}")
                    continue
                raise StageError(stage.stage_name, response.error_message or "failed",
                                 hint=response.hint, cause=response.cause)
            payload = dict(response.payload)
            provenance.update(payload.pop("provenance", {}))
            self.context.update(payload)

        report = self._build_report(provenance)
        self._print_final_summary(report)
        return report

    def _build_report(self, provenance: Dict[str, str]) -> ThresholdReport:
        ctx = self.context
        thresholds = ctx["thresholds"]
        dissipativity = ctx["dissipativity"]
        return ThresholdReport(
            beta=ctx["problem"].beta,
            **thresholds,
            equilibrium=ctx["equilibrium"].to_record(),
            storage=ctx["storage"].to_record(),
            dissipativity_margin=dissipativity.margin,
            positivity_margin=dissipativity.positivity_margin,
            c_bound=ctx.get("c_bound"),
            sublevel_level=ctx.get("sublevel_level"),
            invariance=ctx.get("invariance"),
            local_turnpike=ctx.get("local_turnpike"),
            provenance=provenance,
        )

    def _print_final_summary(self, report: ThresholdReport) -> None:
        if not self.verbose:
            return
        logger.info("=" * 70)
        logger.info("D.I.S.C.O. Threshold Summary")
        logger.info("=" * 70)
        logger.info(f"x_l = {report.equilibrium.x}, ell_tilde_min = {report.ell_tilde_min:.6g}")
        logger.info(f"eta = {report.eta:.6g}, delta = {report.delta:.6g}")
        logger.info(
            f"beta* = {report.beta_star:.6g} (k={report.k_fraction}), "
            f"k=1: {report.beta_star_half:.6g}, k->inf: {report.beta_star_limit:.6g}"
        )
        logger.info(f"sigma = {report.sigma:.6g}, eps = {report.eps_stay:.6g}, theta = {report.theta_stay:.6g}")
        if report.c_bound is not None:
            logger.info(f"C = {report.c_bound.C:.6g}, kappa = {report.c_bound.kappa:.4g}")
        logger.info("=" * 70)


# =============================================================================
# Convenience function for direct usage
# =============================================================================

def run_thresholds(config: RunConfig, verbose: bool = True) -> ThresholdReport:
    """
    Convenience function to run the threshold pipeline.

    Example:
        from core.orchestrator import run_thresholds
        from data.examples import resolve_config

        report = run_thresholds(resolve_config(RunConfig(example=1, rho=0.3)))
    """
    return ThresholdOrchestrator(verbose=verbose).analyze(config)
