"""
D.I.S.C.O. Stage #6: Turnpike Diagnostics
C-bound, largest invariant sublevel level and local turnpike constants.
Failures here only produce warnings.
"""

from typing import Any, Dict

from core.errors import DiscoError
from core.turnpike import (
    estimate_C,
    largest_sublevel_level,
    local_turnpike_constants,
    sublevel_invariance_check,
)
from stages.base_stage import BaseStage


class DiagnosticsStage(BaseStage):
    """Optional checks around the anchored equilibrium."""

    def __init__(self, verbose: bool = True):
        super().__init__(stage_name="diagnostics", label="Diag", verbose=verbose)

    def _execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        config = context["config"]
        eq = context["equilibrium"]
        region = context["region"]
        V_rot = context["value_function"]
        problem = context["problem"]
        out: Dict[str, Any] = {"c_bound": None, "sublevel_level": None, "invariance": None,
                               "local_turnpike": None}

        inner = 2.0 * V_rot.grid.cell_diameter
        outer = region.inner_radius(eq.x)
        try:
            out["c_bound"] = estimate_C(V_rot, problem, eq, context["storage"], (inner, outer),
                                        context["control_grid"])
        except DiscoError as e:
            self.log_warning(f"C-bound skipped: {e}")

        try:
            level = largest_sublevel_level(V_rot, region, eq.x)
            out["sublevel_level"] = level
            if level > 0:
                out["invariance"] = sublevel_invariance_check(V_rot, problem, context["policy"], region, level)
        except DiscoError as e:
            self.log_warning(f"sublevel analysis skipped: {e}")

        c_bound = out["c_bound"]
        level = out["sublevel_level"]
        if c_bound is not None and c_bound.kappa < 0 and level and level > 0:
            M = config.M if config.M is not None else config.horizon
            out["local_turnpike"] = local_turnpike_constants(
                problem.beta, M, context["thresholds"]["theta_one"], c_bound.kappa, level
            )
        self.log_result(
            f"C-bound {'holds' if c_bound is not None and c_bound.satisfied else 'not established'}; "
            f"sublevel level {level}"
        )
        return out
