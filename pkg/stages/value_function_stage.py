"""
D.I.S.C.O. Stage #4: Rotated Value Function
Value iteration on the rotated stage cost, its greedy policy and an upper comparison function.
"""

from typing import Any, Dict

from core.grid_dp import BellmanOperator, extract_policy, value_iteration
from core.model import CostSpec
from core.turnpike import value_comparison_upper
from stages.base_stage import BaseStage


class ValueFunctionStage(BaseStage):
    """Solves for V~ and fits gamma with |V~(x)| <= gamma(|x - x_l|) on the region."""

    def __init__(self, verbose: bool = True):
        super().__init__(stage_name="value-function", label="V~", verbose=verbose)

    def _execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        config = context["config"]
        problem = context["problem"]
        eq = context["equilibrium"]
        cost = CostSpec.rotated(eq, context["storage"])
        operator = BellmanOperator(problem, context["state_grid"], context["control_grid"], cost, config.workers)
        self.think("running value iteration on the rotated cost...")
        V_rot = value_iteration(problem, context["state_grid"], context["control_grid"], cost,
                                tol=config.tol, max_iter=config.max_iter, operator=operator)
        policy = extract_policy(V_rot, problem, context["control_grid"], operator)
        gamma = value_comparison_upper(V_rot, eq, context["region"])
        self.log_result(f"{V_rot.iterations} sweeps, fixed-point bound {V_rot.bellman_residual:.3e}")
        return {
            "value_function": V_rot,
            "policy": policy,
            "gamma": gamma,
            "provenance": {"gamma": "upper envelope of |V~| over the region nodes"},
        }
