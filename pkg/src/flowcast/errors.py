"""Exception taxonomy.

``DataError`` covers malformed inputs (CSV problems, shape mismatches,
bad configs); ``NumericError`` covers runtime numerical failures
(singular solves, diverged particles, degenerate weights).  The CLI maps
them to distinct exit codes.
"""

from __future__ import annotations


class FlowcastError(Exception):
    """Base class for all library errors."""


class DataError(FlowcastError, ValueError):
    """Malformed input data or configuration."""


class NumericError(FlowcastError, RuntimeError):
    """A numerical operation failed or produced non-finite values."""


class FlowSolveError(NumericError):
    """The SPD solve inside a flow step failed."""


class FlowDivergedError(NumericError):
    """Particles became non-finite during the flow."""


class DegenerateWeightsError(NumericError):
    """All particle weights vanished (every log-weight is -inf)."""
