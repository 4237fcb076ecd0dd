"""
D.I.S.C.O. Example Presets
Discounted Infinite-horizon Stability & Control Optimizer

Builtin example settings (grids, default discount factor, initial states,
analysis region) and the run plans of the `reproduce` command.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from core.errors import ConfigError
from core.schemas import DissipativityVariant, ModelKind, ModelSpec, RunConfig


# =============================================================================
# PRESETS
# =============================================================================

EXAMPLE_KINDS: Dict[int, ModelKind] = {
    1: ModelKind.EXAMPLE_1,
    2: ModelKind.EXAMPLE_2,
    3: ModelKind.EXAMPLE_3,
}

EXAMPLE_PRESETS: Dict[int, Dict[str, Any]] = {
    1: {
        "beta": 0.6,
        "grid": 801,
        "ugrid": 601,
        "x0": [[-0.8]],
        "region": [(-1.2, -0.5)],
        "variant": DissipativityVariant.X_ONLY,
        "horizon": 30,
    },
    2: {
        "beta": 0.7,
        "grid": 801,
        "ugrid": 601,
        "x0": [[-0.8]],
        "region": [(-1.2, -0.5)],
        "variant": DissipativityVariant.XU,
        "horizon": 30,
    },
    3: {
        "beta": 0.7,
        "grid": 4001,
        "ugrid": 601,
        "x0": [[1.0]],
        "variant": DissipativityVariant.XU,
        "horizon": 30,
    },
}

DEFAULT_GAMMA = {2: 10.0}

# Fallback resolutions for user-supplied models, per axis.
GENERIC_GRID = 201
GENERIC_UGRID = 101


def get_example_preset(example: int) -> Dict[str, Any]:
    """Preset fields of a builtin example (copy)."""
    if example not in EXAMPLE_PRESETS:
        raise ConfigError(f"unknown example {example}", hint="choose 1, 2 or 3")
    return dict(EXAMPLE_PRESETS[example])


def example_model(example: int, gamma: Optional[float] = None) -> ModelSpec:
    """ModelSpec of a builtin example; gamma only applies to example 2."""
    if example not in EXAMPLE_KINDS:
        raise ConfigError(f"unknown example {example}", hint="choose 1, 2 or 3")
    if gamma is not None and example != 2:
        raise ConfigError("--gamma only applies to example 2 or polynomial models")
    if gamma is None:
        gamma = DEFAULT_GAMMA.get(example, 0.0)
    return ModelSpec(kind=EXAMPLE_KINDS[example], gamma=gamma)


def resolve_config(config: RunConfig, gamma: Optional[float] = None) -> RunConfig:
    """
    Fill every field the user left unset from the example preset.

    Fields explicitly set (flags or config file) always win. A model
    without an example gets generic grid resolutions only.
    """
    explicit = config.model_fields_set
    update: Dict[str, Any] = {}

    if config.model is None:
        if config.example is None:
            raise ConfigError("no model given", hint="pass --example {1,2,3} or --config FILE")
        update["model"] = example_model(config.example, gamma)
    elif gamma is not None:
        if config.model.kind in (ModelKind.EXAMPLE_1, ModelKind.EXAMPLE_3):
            raise ConfigError("--gamma only applies to example 2 or polynomial models")
        update["model"] = config.model.model_copy(update={"gamma": gamma})

    if config.example is not None and config.model is None:
        preset = get_example_preset(config.example)
    else:
        preset = {"grid": GENERIC_GRID, "ugrid": GENERIC_UGRID}
    for key, value in preset.items():
        if key not in explicit or getattr(config, key) is None:
            update[key] = value

    resolved = config.model_copy(update=update)
    return RunConfig.model_validate(resolved.model_dump())


# =============================================================================
# REPRODUCTION PLANS
# =============================================================================

@dataclass(frozen=True)
class ReproductionRun:
    """One closed-loop run of a reproduction: model variant, beta and start."""
    label: str
    group: str
    beta: float
    x0: Tuple[float, ...]
    gamma: Optional[float] = None


@dataclass(frozen=True)
class ReproductionPlan:
    """Every run of one example, grouped by the figure set they belong to."""
    example: int
    runs: List[ReproductionRun] = field(default_factory=list)

    def groups(self) -> List[str]:
        seen: List[str] = []
        for run in self.runs:
            if run.group not in seen:
                seen.append(run.group)
        return seen

    def select_gamma(self, gamma: Optional[float]) -> "ReproductionPlan":
        """Keep only the runs at one gamma (example 2)."""
        if gamma is None:
            return self
        runs = [r for r in self.runs if r.gamma is not None and np.isclose(r.gamma, gamma)]
        if not runs:
            raise ConfigError(f"no reproduction run uses gamma={gamma:g}")
        return ReproductionPlan(self.example, runs)


EXAMPLE_1_SWEEP_X0 = (-1.5, -1.2, -1.0, -0.8, -0.6, -0.3, 0.3, 0.6, 1.0, 1.5)
EXAMPLE_2_GAMMAS = (0.0, 1.0, 10.0)
EXAMPLE_2_SWEEP_BETAS = (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 0.99)


def _example_1_plan() -> ReproductionPlan:
    runs = [ReproductionRun(f"beta={b:g}", "beta", b, (-0.8,)) for b in (0.5, 0.6, 0.7, 0.8)]
    for b in (0.6, 0.7):
        runs += [ReproductionRun(f"beta={b:g},x0={x:g}", f"x0-beta={b:g}", b, (x,)) for x in EXAMPLE_1_SWEEP_X0]
    return ReproductionPlan(1, runs)


def _example_2_plan() -> ReproductionPlan:
    runs = []
    for b in (0.7, 0.95):
        runs += [ReproductionRun(f"beta={b:g},gamma={g:g}", f"gamma-beta={b:g}", b, (-0.8,), g)
                 for g in EXAMPLE_2_GAMMAS]
    runs += [ReproductionRun(f"beta={b:g},gamma=10", "beta-gamma=10", b, (-0.8,), 10.0)
             for b in EXAMPLE_2_SWEEP_BETAS]
    return ReproductionPlan(2, runs)


def _example_3_plan() -> ReproductionPlan:
    return ReproductionPlan(3, [
        ReproductionRun("beta=0.7,x0=1", "turnpike", 0.7, (1.0,)),
        ReproductionRun("beta=0.59,x0=0.004", "no-turnpike", 0.59, (0.004,)),
    ])


REPRODUCTION_PLANS = {1: _example_1_plan, 2: _example_2_plan, 3: _example_3_plan}


def get_reproduction_plan(example: int, gamma: Optional[float] = None) -> ReproductionPlan:
    if example not in REPRODUCTION_PLANS:
        raise ConfigError(f"unknown example {example}", hint="choose 1, 2 or 3")
    if gamma is not None and example != 2:
        raise ConfigError("--gamma only applies to example 2")
    return REPRODUCTION_PLANS[example]().select_gamma(gamma)
