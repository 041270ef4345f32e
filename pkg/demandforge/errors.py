"""Exceptions raised across the demandforge package.

Every error derives from `DemandForgeError` and from the builtin that a
caller would otherwise expect (`ValueError`, `KeyError`, `RuntimeError`),
so plain `except ValueError` blocks keep working.
"""

from typing import List


class DemandForgeError(Exception):
    """Base class for every demandforge error."""


class InputError(DemandForgeError, ValueError):
    """Malformed input files, missing fields or invalid arguments."""


class MarginError(InputError):
    """Trip margins that cannot be balanced."""


class HierarchyError(InputError):
    """Observed trip tables whose hierarchy sums do not agree."""


class RouteError(InputError):
    """A demanded origin, destination and mode without a usable route."""


class UnknownLinkError(DemandForgeError, KeyError):
    """A link or mode that is not part of the network."""


class DomainError(DemandForgeError, ValueError):
    """A value outside the domain of a cost or choice function."""


class NestingError(DomainError):
    """A nest structure the closed-form evaluators cannot handle."""


class ConvergenceError(DemandForgeError, RuntimeError):
    """An iterative method stopped before reaching its tolerance."""


class DivergenceError(ConvergenceError):
    """The calibration residual grew for too many consecutive evaluations."""

    def __init__(self, message: str, trace: List[float] = None) -> None:
        """Initalizes the error with the residual trace.

        Arguments:
        ----
        message {str} -- The error message.

        Keyword Arguments:
        ----
        trace {List[float]} -- The residual norms seen so far. (default: {None})
        """

        super().__init__(message)
        self.trace = list(trace or [])
