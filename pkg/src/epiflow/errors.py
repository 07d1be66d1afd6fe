"""Exception hierarchy shared across the package."""

from __future__ import annotations


class EpiflowError(Exception):
    """Base class for all package errors."""


class GraphParseError(EpiflowError):
    """A flow-graph document violates the schema or a type invariant."""


class ScenarioParseError(EpiflowError):
    """A scenario document violates the schema or a type invariant."""


class CompileError(EpiflowError):
    """A graph/scenario/parameter combination cannot be compiled."""


class BindError(EpiflowError):
    """A flat parameter vector does not match the model's degrees of freedom."""


class SimulationError(EpiflowError):
    """Invalid simulation request (bad step size, empty horizon, bad x0)."""


class DataError(EpiflowError):
    """Observed-data ingestion failed or violates dataset invariants."""


class CalibrationError(EpiflowError):
    """Calibration cannot start or has no usable data."""


class PlannerError(EpiflowError):
    """Planner misconfiguration (e.g. missing endpoint)."""


class PlannerTransportError(PlannerError):
    """The planner endpoint stayed unreachable after transport retries."""


class GraphBudgetExhausted(EpiflowError):
    """The graph synthesis loop ran out of iterations without a Pass verdict.

    Carries the attempt history so callers can report the full trace.
    """

    def __init__(self, message: str, history=()):
        super().__init__(message)
        self.history = tuple(history)
