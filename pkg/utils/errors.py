"""
Exception hierarchy shared by every package.

The CLI maps InputError (and subclasses) to exit code 2 and
InvariantViolation to exit code 3.
"""


class DDTrackError(Exception):
    """Base class for all errors raised by this project."""


class InputError(DDTrackError, ValueError):
    """Bad user input: shapes, parameter ranges, configuration, paths."""


class FormatError(InputError):
    """A file on disk is malformed. Messages always name the offending field."""


class InvariantViolation(DDTrackError, RuntimeError):
    """An internal invariant was broken; this indicates a bug, not bad input."""
