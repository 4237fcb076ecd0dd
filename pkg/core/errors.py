"""
D.I.S.C.O. Error Hierarchy
Discounted Infinite-horizon Stability & Control Optimizer

Every failure the library can signal is a DiscoError. The CLI maps
ConfigError to exit code 2 and every other DiscoError to exit code 1.
"""

from typing import Any, List, Optional, Sequence


class DiscoError(Exception):
    """Base class for all analysis failures."""

    exit_code: int = 1

    def __init__(self, message: str, hint: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.hint = hint

    def __str__(self) -> str:
        if self.hint:
            return f"{self.message} (hint: {self.hint})"
        return self.message


class ConfigError(DiscoError):
    """Malformed configuration, model description or output location."""

    exit_code = 2


class ModelSpecError(ConfigError):
    """A ModelSpec cannot be expanded into a control system."""


# =============================================================================
# MODEL EVALUATION
# =============================================================================

class ConstraintViolationError(DiscoError):
    """(x, u) lies outside the joint constraint set Y."""


class ImageOutOfDomainError(DiscoError):
    """f(x, u) leaves the state constraint set."""


class DomainError(DiscoError):
    """A scalar argument lies outside the domain of an operation."""


# =============================================================================
# DYNAMIC PROGRAMMING
# =============================================================================

class InfeasibleNodeError(DiscoError):
    """One or more grid nodes have no admissible control."""

    def __init__(self, nodes: Sequence[Sequence[float]], hint: Optional[str] = None):
        self.nodes: List[List[float]] = [list(map(float, n)) for n in nodes]
        shown = ", ".join(str(n) for n in self.nodes[:5])
        more = f" (+{len(self.nodes) - 5} more)" if len(self.nodes) > 5 else ""
        super().__init__(f"no admissible control at node(s) {shown}{more}", hint)


class NonConvergenceError(DiscoError):
    """Value iteration exhausted its iteration budget."""

    def __init__(self, last_residual: float, iterations: int):
        self.last_residual = float(last_residual)
        self.iterations = int(iterations)
        super().__init__(
            f"value iteration did not converge after {iterations} sweeps "
            f"(last residual bound {last_residual:.3e})",
            hint="raise --max-iter or loosen --tol",
        )


class BudgetExceededError(DiscoError):
    """Exhaustive enumeration would exceed the evaluation budget."""

    def __init__(self, required: int, budget: int):
        self.required = int(required)
        self.budget = int(budget)
        super().__init__(f"enumeration needs {required} sequences, budget is {budget}")


class InadmissibleControlError(DiscoError):
    """An open-loop control sequence becomes inadmissible at a step."""

    def __init__(self, step: int, detail: str = ""):
        self.step = int(step)
        suffix = f": {detail}" if detail else ""
        super().__init__(f"control sequence inadmissible at step {step}{suffix}")


# =============================================================================
# DISSIPATIVITY
# =============================================================================

class StorageSynthesisError(DiscoError):
    """No linear storage function satisfies the stationarity system."""

    def __init__(self, residual: float, hint: Optional[str] = None):
        self.residual = float(residual)
        super().__init__(
            f"linear storage synthesis failed (least-squares residual {residual:.3e})",
            hint or "supply a storage function, e.g. --storage quadratic:-1",
        )


class NotPositiveDefiniteError(DiscoError):
    """Samples for a comparison-function fit are not positive definite."""


class ComparisonRangeError(DiscoError):
    """A comparison function cannot be inverted at the requested value."""


# =============================================================================
# TURNPIKE
# =============================================================================

class TrajectoryLengthError(DiscoError):
    """Trajectory is shorter than the requested horizon."""


class RegionError(DiscoError):
    """A region, annulus or sublevel set is empty or misplaced."""


class ContinuityProbeError(DiscoError):
    """No candidate radius passed the continuity probe."""

    def __init__(self, rho: float):
        self.rho = float(rho)
        super().__init__(
            f"no radius on the ladder rho/2^j keeps f(x,u) within rho={rho:g}",
            hint="rho is probably too large for the dynamics; try a smaller --rho",
        )


# =============================================================================
# PIPELINE
# =============================================================================

class StageError(DiscoError):
    """A pipeline stage failed; carries the stage label."""

    def __init__(self, stage: str, message: str, hint: Optional[str] = None,
                 cause: Optional[Any] = None):
        self.stage = stage
        self.cause = cause
        if isinstance(cause, DiscoError):
            self.exit_code = cause.exit_code
        super().__init__(f"[{stage}] {message}", hint)
