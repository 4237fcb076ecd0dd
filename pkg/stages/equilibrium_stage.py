"""
D.I.S.C.O. Stage #1: Equilibria
Finds the stationary equilibria and picks the one the local analysis is anchored at.
"""

from typing import Any, Dict

import numpy as np

from core.dissipativity import find_equilibria, select_local_equilibrium
from core.errors import RegionError
from stages.base_stage import BaseStage


class EquilibriumStage(BaseStage):
    """Equilibrium search on the joint state/control grid."""

    def __init__(self, verbose: bool = True):
        super().__init__(stage_name="equilibria", label="Equil", verbose=verbose)

    def _execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        config = context["config"]
        system = context["system"]
        self.think("scanning the joint grid for equilibria...")
        equilibria = find_equilibria(system, context["problem"].beta,
                                     context["state_grid"], context["control_grid"])
        if not equilibria:
            raise RegionError("no equilibrium found on the grid", hint="refine --grid/--ugrid")
        index = select_local_equilibrium(system, equilibria, config.anchor)
        eq = equilibria[index]
        self.log_result(
            f"anchored at equilibrium #{index}: x={np.round(eq.x, 6).tolist()}, "
            f"u={np.round(eq.u, 6).tolist()}, l={eq.stage_cost_value:.6g}"
        )
        how = "--anchor" if config.anchor is not None else (
            "only equilibrium" if len(equilibria) == 1 else "cheapest non-global local minimizer of l on f(x,u)=x"
        )
        return {
            "equilibria": equilibria,
            "local_index": index,
            "equilibrium": eq,
            "provenance": {"equilibrium": f"index {index} of {len(equilibria)} ({how})"},
        }
