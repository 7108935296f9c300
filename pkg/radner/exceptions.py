from typing import Any, Dict, List, Optional, Sequence


class RadnerError(Exception):
    """Base class for every failure the engine reports."""

    stage: str = "engine"

    def __init__(self, message: str, **witness: Any):
        super().__init__(message)
        self.message = message
        self.witness = witness

    def to_report(self) -> Dict[str, Any]:
        return {
            "error": type(self).__name__,
            "stage": self.stage,
            "message": self.message,
            "witness": {k: _plain(v) for k, v in self.witness.items()},
        }


def _plain(value: Any) -> Any:
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


class ExprSyntaxError(RadnerError, ValueError):
    stage = "exprlang"

    def __init__(self, message: str, position: int, text: str = ""):
        super().__init__(f"{message} at position {position}", position=position, text=text)
        self.position = position


class ExprDomainError(RadnerError, ArithmeticError):
    stage = "exprlang"

    def __init__(self, message: str, subexpression: str):
        super().__init__(f"{message}: {subexpression}", subexpression=subexpression)
        self.subexpression = subexpression


class EconomyConfigError(RadnerError, ValueError):
    stage = "economy"

    def __init__(self, message: str, errors: Optional[List[Dict[str, Any]]] = None):
        super().__init__(message, errors=errors or [])


class AssumptionViolation(RadnerError):
    stage = "economy"

    def __init__(self, message: str, assumption: str, location: Optional[Sequence[float]] = None):
        super().__init__(message, assumption=assumption, location=location)
        self.assumption = assumption
        self.location = location


class SimulationError(RadnerError):
    stage = "markov"

    def __init__(self, message: str, path: int, step: int):
        super().__init__(f"{message} (path {path}, step {step})", path=path, step=step)
        self.path = path
        self.step = step


class ConvergenceError(RadnerError):
    stage = "planner"


class DegenerateEconomyError(RadnerError):
    stage = "planner"


class PDESolveError(RadnerError):
    stage = "pricing"


class NumeraireError(RadnerError):
    stage = "pricing"


class SingularVolatilityError(RadnerError):
    stage = "completeness"


class StageArtifactError(RadnerError):
    stage = "cli"
