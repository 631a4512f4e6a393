"""
Exception hierarchy shared by all engine services
"""
from typing import Any, List, Optional


class EngineError(Exception):
    """Base class for every engine failure"""


class CaseParseError(EngineError):
    """Malformed case input, optionally located by line number"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        located = f"line {line}: {message}" if line is not None else message
        super().__init__(located)


class CaseValidationError(EngineError):
    """Parsed case violates one or more type invariants"""

    def __init__(self, diagnostics: List[Any]):
        self.diagnostics = diagnostics
        summary = "; ".join(str(d) for d in diagnostics[:5])
        more = f" (+{len(diagnostics) - 5} more)" if len(diagnostics) > 5 else ""
        super().__init__(f"case validation failed: {summary}{more}")


class PowerFlowError(EngineError):
    """Newton iteration did not converge"""

    def __init__(self, message: str, mismatch: float):
        self.mismatch = mismatch
        super().__init__(f"{message} (final mismatch {mismatch:.3e} p.u.)")


class SingularJacobianError(EngineError):
    """Jacobian cannot be factorized at the expansion point"""

    def __init__(self, bus: Any):
        self.bus = bus
        super().__init__(f"singular Jacobian, degenerate bus {bus}")


class SimulationError(EngineError):
    """Frequency integration produced a non-finite state"""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite SFR state at integration step {step}")


class SolverError(EngineError):
    """Math program could not be solved as requested"""


class ModelBuildError(EngineError):
    """Inputs to a dispatch model builder are inconsistent"""


class ConvergenceError(EngineError):
    """Distributed iteration diverged; carries the history so far"""

    def __init__(self, message: str, history: Optional[list] = None):
        self.history = history or []
        super().__init__(message)


class ProtocolError(EngineError):
    """Malformed or unexpected agent protocol frame"""


class AgentAbort(EngineError):
    """A round was aborted (agent failure, timeout or dropped connection)"""

    def __init__(self, message: str, history: Optional[list] = None):
        self.history = history or []
        super().__init__(message)
