"""Exception hierarchy shared by all stages.

Exit-code contract for the CLI: usage/config errors map to 1, data/format
errors to 2, numeric failures to 3.
"""


class CorosegError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 2


class UsageError(CorosegError):
    """Bad configuration or command-line usage."""

    exit_code = 1


class DataError(CorosegError):
    """Unreadable, malformed or semantically invalid input data."""

    exit_code = 2


class NumericError(CorosegError):
    """Numerical failure: non-convergence, CFL violation, degenerate fit."""

    exit_code = 3


class NoSeedError(DataError):
    """No seed candidate passed all three thresholds."""

    def __init__(self, message, candidates=None):
        super().__init__(message)
        self.candidates = candidates or []


class AortaNotFoundError(DataError):
    """Circle search found no consistent aorta cross-section stack."""


class FitError(NumericError):
    """Least-squares Gaussian fit failed."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class CflError(NumericError):
    """Time step violates the CFL stability bound."""


class BacktrackStagnation(NumericError):
    """Gradient descent on the arrival field stalled before a source."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path
