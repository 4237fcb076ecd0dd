"""
D.I.S.C.O. Pydantic Schemas
Discounted Infinite-horizon Stability & Control Optimizer

Serializable documents: model descriptions, run configuration and every
report the analysis produces.
"""

from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy.optimize import bisect

from core.errors import ComparisonRangeError, DomainError


# =============================================================================
# ENUMS
# =============================================================================

class ModelKind(str, Enum):
    """Model families understood by expand_model_spec."""
    EXAMPLE_1 = "builtin-example-1"
    EXAMPLE_2 = "builtin-example-2"
    EXAMPLE_3 = "builtin-example-3"
    POLYNOMIAL = "polynomial"


class CostKind(str, Enum):
    """Which stage cost a value function was computed for."""
    ORIGINAL = "original"
    ROTATED = "rotated"


class StorageForm(str, Enum):
    """Supported storage function shapes."""
    LINEAR = "linear"
    QUADRATIC = "quadratic-diagonal"
    TABULATED = "tabulated"


class DissipativityVariant(str, Enum):
    """Deviation measured in the state only, or in state and control."""
    X_ONLY = "x"
    XU = "xu"


class RolloutMode(str, Enum):
    """How rollout picks a control at a continuous state."""
    ARGMIN = "argmin"
    NEAREST = "nearest"
    INTERPOLATE = "interpolate"


class TerminalClass(str, Enum):
    """Long-run behaviour label of a closed-loop trajectory."""
    GLOBAL = "global"
    LOCAL = "local"
    BOUNDARY = "boundary"
    NONE = "none"


# =============================================================================
# MODEL DESCRIPTION
# =============================================================================

Interval = Tuple[float, float]


def _check_boxes(value: Optional[List[Interval]]) -> Optional[List[Interval]]:
    if value is None:
        return value
    if not value:
        raise ValueError("box needs at least one axis")
    for lo, hi in value:
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
            raise ValueError(f"invalid interval [{lo}, {hi}]")
    return value


class PolynomialTerm(BaseModel):
    """One monomial c * prod x_i^x[i] * prod u_j^u[j]."""
    c: float = Field(..., description="Coefficient")
    x: List[int] = Field(default_factory=list, description="State exponents (one per axis, may be empty)")
    u: List[int] = Field(default_factory=list, description="Control exponents (one per axis, may be empty)")

    @field_validator("x", "u")
    @classmethod
    def nonnegative_exponents(cls, v: List[int]) -> List[int]:
        if any(p < 0 for p in v):
            raise ValueError("exponents must be non-negative")
        return v


class ModelSpec(BaseModel):
    """Serializable model description (JSON field names are part of the CLI contract)."""
    kind: ModelKind = Field(..., description="Builtin example or polynomial family")
    gamma: float = Field(default=0.0, ge=0.0, description="Weight of the optional gamma*|u|_1 cost term")
    f_coeffs: Optional[List[List[PolynomialTerm]]] = Field(
        default=None, description="Dynamics: one list of monomials per state component"
    )
    l_coeffs: Optional[List[PolynomialTerm]] = Field(default=None, description="Stage cost monomials")
    state_box: Optional[List[Interval]] = Field(default=None, description="State constraint box, one [lo, hi] per axis")
    control_box: Optional[List[Interval]] = Field(default=None, description="Control constraint box, one [lo, hi] per axis")

    @field_validator("state_box", "control_box")
    @classmethod
    def valid_boxes(cls, v: Optional[List[Interval]]) -> Optional[List[Interval]]:
        return _check_boxes(v)

    @model_validator(mode="after")
    def polynomial_tables_present(self) -> "ModelSpec":
        if self.kind == ModelKind.POLYNOMIAL:
            missing = [name for name in ("f_coeffs", "l_coeffs", "state_box", "control_box")
                       if getattr(self, name) is None]
            if missing:
                raise ValueError(f"polynomial model requires {', '.join(missing)}")
        return self


# =============================================================================
# COMPARISON FUNCTIONS
# =============================================================================

class ComparisonFunction(BaseModel):
    """
    Piecewise-linear class-K_inf function.

    Breakpoints r_0 = 0 < r_1 < ... < r_J with values 0 = v_0 < ... < v_J,
    extended linearly beyond r_J with the slope of the last segment.
    """
    breakpoints: List[float] = Field(..., description="Deviation breakpoints, starting at 0")
    values: List[float] = Field(..., description="Function values, starting at 0")

    @model_validator(mode="after")
    def strictly_increasing(self) -> "ComparisonFunction":
        r = np.asarray(self.breakpoints, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if r.shape != v.shape or r.size < 2:
            raise ValueError("need matching breakpoints and values, at least two of each")
        if r[0] != 0.0 or v[0] != 0.0:
            raise ValueError("comparison function must start at (0, 0)")
        if np.any(np.diff(r) <= 0) or np.any(np.diff(v) <= 0):
            raise ValueError("breakpoints and values must be strictly increasing")
        return self

    @property
    def tail_slope(self) -> float:
        return (self.values[-1] - self.values[-2]) / (self.breakpoints[-1] - self.breakpoints[-2])

    def __call__(self, r):
        r_arr = np.asarray(r, dtype=float)
        rj, vj = self.breakpoints[-1], self.values[-1]
        inside = np.interp(r_arr, self.breakpoints, self.values)
        out = np.where(r_arr > rj, vj + self.tail_slope * (r_arr - rj), inside)
        return float(out) if out.ndim == 0 else out

    def inverse(self, value: float, extrapolate: bool = False) -> float:
        """Invert by monotone bisection; outside the fitted range only when extrapolate=True."""
        if value < 0:
            raise DomainError(f"cannot invert a comparison function at negative value {value}")
        if value == 0:
            return 0.0
        rj, vj = self.breakpoints[-1], self.values[-1]
        if value > vj:
            if not extrapolate:
                raise ComparisonRangeError(
                    f"value {value:.6g} exceeds fitted range [0, {vj:.6g}]",
                    hint="enlarge the region the comparison function was fitted on",
                )
            hi = rj + (value - vj) / self.tail_slope * 1.01 + 1e-12
        else:
            hi = rj
        return float(bisect(lambda r: self(r) - value, 0.0, hi, xtol=1e-15 * max(1.0, hi), maxiter=500))


# =============================================================================
# MODEL RECORDS
# =============================================================================

class EquilibriumRecord(BaseModel):
    """Serializable equilibrium."""
    x: List[float]
    u: List[float]
    beta: float
    stage_cost_value: float
    residual: float
    refined: bool = True


class StorageRecord(BaseModel):
    """Serializable storage function summary."""
    form: StorageForm
    anchor: List[float]
    coefficients: List[float] = Field(default_factory=list, description="nu for linear, diagonal for quadratic")
    lower_bound: float
    synthesis_residual: Optional[float] = None


# =============================================================================
# REPORTS
# =============================================================================

class DissipativityReport(BaseModel):
    """Outcome of a grid verification of (local) discounted strict dissipativity."""
    variant: DissipativityVariant
    beta: float
    region: List[Interval]
    accepted: bool
    margin: float = Field(..., description="min over the verification grid of ell_tilde - alpha_fit(deviation)")
    margin_excludes_cell: bool = Field(
        default=False, description="margin and fit skip pairs within one cell of the equilibrium"
    )
    positivity_margin: float = Field(..., description="min ell_tilde over pairs outside one cell of the zero set")
    ell_tilde_min: float = Field(..., description="inf of the rotated cost over all admissible pairs")
    ell_tilde_argmin: List[float] = Field(default_factory=list, description="(x, u) attaining ell_tilde_min")
    alpha_breakpoints: List[float] = Field(default_factory=list)
    alpha_values: List[float] = Field(default_factory=list)
    violations: List[List[float]] = Field(default_factory=list, description="(x, u) pairs breaking strict positivity")
    violation_count: int = 0
    cell_radius: float
    checked_pairs: int

    @property
    def alpha_fit(self) -> Optional[ComparisonFunction]:
        if len(self.alpha_breakpoints) < 2:
            return None
        return ComparisonFunction(breakpoints=self.alpha_breakpoints, values=self.alpha_values)


class QSetResult(BaseModel):
    """Times at which a trajectory is at least epsilon away from a reference."""
    epsilon: float
    M: int
    indices: List[int]
    cardinality: int


class CBoundReport(BaseModel):
    """Estimate of the constant C with V_rot <= C * inf_u ell_tilde on an annulus."""
    C: float
    ratio_max: float = Field(..., description="Raw maximum ratio before clamping C to >= 1")
    beta: float
    bound: float = Field(..., description="1/(1-beta)")
    kappa: float = Field(..., description="(1-beta) - 1/C")
    satisfied: bool
    annulus: Tuple[float, float]
    nodes_used: int
    excluded_nodes: List[List[float]] = Field(default_factory=list)


class LyapunovCheckReport(BaseModel):
    """Per-step decrease residuals of V_rot along a trajectory."""
    residuals: List[float]
    max_residual: float
    slack: float
    kappa: float
    delta: float = 0.0
    passed: bool


class InvarianceResult(BaseModel):
    """Closed-loop forward invariance of a sublevel set."""
    holds: bool
    level: float
    checked_nodes: int
    witness: Optional[List[float]] = None


class ValueBoundReport(BaseModel):
    """Check of V_rot(x) >= alpha(|x - x_l|) on a region."""
    passed: bool
    min_gap: float
    worst_node: Optional[List[float]] = None
    nodes_checked: int


class LocalTurnpikeConstants(BaseModel):
    """Constants of the local turnpike argument without assumed invariance."""
    beta: float
    M: int
    theta: float
    kappa: float
    level: float
    delta: float


class ThresholdReport(BaseModel):
    """Every quantity of the leave-the-neighbourhood threshold analysis."""
    beta: float
    rho: float
    eta: float
    delta: float = Field(..., description="alpha_fit(eta)")
    ell_tilde_min: float
    k_fraction: int
    beta_star: float = Field(..., description="k/(k+1) * delta/(delta - ell_tilde_min)")
    beta_star_half: float = Field(..., description="k = 1 value delta/(2(delta - ell_tilde_min))")
    beta_star_limit: float = Field(..., description="k -> infinity value delta/(delta - ell_tilde_min)")
    K: int
    sigma: float
    eps_stay: float
    theta_stay: float
    theta_one: float = Field(..., description="sigma(beta, 1)/2, used by the local turnpike constants")
    equilibrium: EquilibriumRecord
    storage: StorageRecord
    dissipativity_margin: float
    positivity_margin: float
    c_bound: Optional[CBoundReport] = None
    sublevel_level: Optional[float] = None
    invariance: Optional[InvarianceResult] = None
    local_turnpike: Optional[LocalTurnpikeConstants] = None
    provenance: Dict[str, str] = Field(default_factory=dict)


class ScanCell(BaseModel):
    """One (beta, x0) closed-loop run of a scan."""
    beta: float
    x0: List[float]
    label: TerminalClass
    terminal_x: List[float]
    nearest_equilibrium: Optional[int] = None
    max_excursion: float = Field(..., description="max_k |x(k) - x0|")
    steps_to_target: Optional[int] = Field(default=None, description="first k within tolerance of the label's target")
    states: List[List[float]] = Field(default_factory=list)


class ScanTable(BaseModel):
    """Classification table of a beta scan."""
    model: ModelSpec
    horizon: int
    tolerance: float
    equilibria: List[EquilibriumRecord]
    cells: List[ScanCell]
    beta_hat_2: Optional[float] = Field(default=None, description="largest beta labelled local for x0 near x_l")


class BetaOneEstimate(BaseModel):
    """Empirical lower threshold: smallest beta whose C-bound holds (heuristic)."""
    beta_one: Optional[float]
    heuristic: bool = True
    reports: List[CBoundReport] = Field(default_factory=list)


# =============================================================================
# RUN CONFIGURATION
# =============================================================================

class RunConfig(BaseModel):
    """Fully resolvable configuration of one CLI command."""
    model: Optional[ModelSpec] = Field(default=None, description="Model description")
    example: Optional[int] = Field(default=None, ge=1, le=3, description="Builtin example preset")
    beta: Optional[float] = Field(default=None, description="Discount factor in (0, 1)")
    beta_grid: Optional[List[float]] = Field(default=None, description="Discount factors for scans")
    grid: Optional[int] = Field(default=None, ge=2, description="State nodes per axis")
    ugrid: Optional[int] = Field(default=None, ge=2, description="Control nodes per axis")
    tol: float = Field(default=1e-6, gt=0, description="Value iteration fixed-point tolerance")
    max_iter: int = Field(default=10000, ge=1)
    x0: Optional[List[List[float]]] = Field(default=None, description="Initial states")
    horizon: int = Field(default=30, ge=0)
    rho: Optional[float] = Field(default=None, gt=0)
    k_fraction: int = Field(default=1, ge=1)
    K: int = Field(default=1, ge=1, description="Stay horizon of the stay-near estimates")
    storage: str = Field(default="auto", description="auto | zero | linear:... | quadratic:... | tabulated:PATH")
    region: Optional[List[Interval]] = None
    variant: DissipativityVariant = DissipativityVariant.XU
    epsilon: float = Field(default=0.1, gt=0, description="Q-set radius")
    M: Optional[int] = Field(default=None, ge=0, description="Q-set horizon (defaults to horizon)")
    classify_tol: float = Field(default=0.05, gt=0)
    verify_nodes: int = Field(default=201, ge=2)
    anchor: Optional[int] = Field(default=None, ge=0, description="Index into the cost-sorted equilibria")
    workers: int = Field(default=1, ge=1)
    mode: RolloutMode = RolloutMode.ARGMIN
    refine: bool = False
    out: str = "runs"

    @field_validator("region")
    @classmethod
    def valid_region(cls, v: Optional[List[Interval]]) -> Optional[List[Interval]]:
        return _check_boxes(v)

    @field_validator("beta")
    @classmethod
    def beta_in_unit_interval(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and not 0.0 < v < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        return v

    @field_validator("beta_grid")
    @classmethod
    def beta_grid_in_unit_interval(cls, v: Optional[List[float]]) -> Optional[List[float]]:
        if v is not None:
            if not v:
                raise ValueError("beta grid is empty")
            if any(not 0.0 < b < 1.0 for b in v):
                raise ValueError("every beta must lie in (0, 1)")
        return v
