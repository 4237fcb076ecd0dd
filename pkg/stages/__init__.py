"""
D.I.S.C.O. Stages Package
Steps of the threshold pipeline, run in order by the ThresholdOrchestrator:

1. EquilibriumStage     - stationary equilibria and the local anchor
2. StorageStage         - supplied or synthesized storage function
3. DissipativityStage   - grid certificate on the analysis region
4. ValueFunctionStage   - rotated value function, policy, gamma
5. ThresholdStage       - eta, delta, beta*, sigma, eps, theta
6. DiagnosticsStage     - C-bound, sublevel invariance (non-fatal)
"""

from stages.base_stage import BaseStage, StageResponse
from stages.equilibrium_stage import EquilibriumStage
from stages.storage_stage import StorageStage
from stages.dissipativity_stage import DissipativityStage
from stages.value_function_stage import ValueFunctionStage
from stages.threshold_stage import ThresholdStage
from stages.diagnostics_stage import DiagnosticsStage

__all__ = [
    "BaseStage",
    "StageResponse",
    "EquilibriumStage",
    "StorageStage",
    "DissipativityStage",
    "ValueFunctionStage",
    "ThresholdStage",
    "DiagnosticsStage",
]
