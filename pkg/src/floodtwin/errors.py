"""Exception taxonomy shared across the package.

Each class maps to one CLI exit code, so runner code can translate
failures without string matching.
"""


class FloodTwinError(Exception):
    """Base class for package errors."""

    exit_code = 1


class ConfigurationError(FloodTwinError):
    """Invalid or inconsistent configuration, experiment spec or file schema."""

    exit_code = 2


class NumericalBlowupError(FloodTwinError):
    """Solver produced a non-finite state.

    Carries the model time and flat cell index of the first offending cell.
    """

    exit_code = 3

    def __init__(self, message, t=None, cell=None, member=None):
        super().__init__(message)
        self.t = t
        self.cell = cell
        self.member = member


class AlignmentError(FloodTwinError):
    """Timestamp or grid mismatch between series that must line up."""

    exit_code = 4


class ExtrapolationError(AlignmentError):
    """Requested time lies outside a series' span."""
