"""
D.I.S.C.O. Core Package
Model layer, grid dynamic programming, dissipativity and turnpike analysis,
and the threshold pipeline orchestrator.
"""

from core.errors import ConfigError, DiscoError, StageError
from core.schemas import (
    ComparisonFunction,
    DissipativityReport,
    ModelSpec,
    RunConfig,
    ScanTable,
    ThresholdReport,
)
from core.orchestrator import Setting, ThresholdOrchestrator, build_setting, run_thresholds

__all__ = [
    "ConfigError",
    "DiscoError",
    "StageError",
    "ComparisonFunction",
    "DissipativityReport",
    "ModelSpec",
    "RunConfig",
    "ScanTable",
    "ThresholdReport",
    "Setting",
    "ThresholdOrchestrator",
    "build_setting",
    "run_thresholds",
]
