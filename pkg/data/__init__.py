"""
D.I.S.C.O. Data Package
Builtin example presets, reproduction plans and sample model configurations.
"""

from data.examples import (
    EXAMPLE_PRESETS,
    REPRODUCTION_PLANS,
    ReproductionPlan,
    ReproductionRun,
    example_model,
    get_example_preset,
    get_reproduction_plan,
    resolve_config,
)

__all__ = [
    "EXAMPLE_PRESETS",
    "REPRODUCTION_PLANS",
    "ReproductionPlan",
    "ReproductionRun",
    "example_model",
    "get_example_preset",
    "get_reproduction_plan",
    "resolve_config",
]
