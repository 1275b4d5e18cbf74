"""Exception types raised by the solver, simulator and harness."""

from __future__ import annotations


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class SolverError(RuntimeError):
    """The root finder could not bracket a solution."""


class InfeasibleLoadError(ValueError):
    """A large-system load violates the receiver's feasibility condition."""

    def __init__(self, message: str, margin: float) -> None:
        super().__init__(message)
        self.margin = margin


class ReceiverInapplicableError(ValueError):
    """The requested receiver cannot be built for this realization."""


class ConvergenceError(RuntimeError):
    """Best-response iteration hit its iteration limit.

    The partial trace is attached so callers can inspect the power history.
    """

    def __init__(self, message: str, trace) -> None:
        super().__init__(message)
        self.trace = trace


class ConfigError(ValueError):
    """The experiment configuration is malformed."""
