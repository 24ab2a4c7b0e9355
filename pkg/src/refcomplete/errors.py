"""Shared exception types.

Three failure families are distinguished throughout the package:

* ``InvalidArgumentError`` -- the caller handed in data that violates a
  documented precondition (bad shapes, empty masks, out-of-range values).
* ``ConfigurationError`` -- a config/architecture mismatch (unknown backend
  id, checkpoint built for a different model shape).
* ``InternalError`` -- an internal invariant was broken; always a bug.
"""


class InvalidArgumentError(ValueError):
    """A documented precondition on an argument was violated."""


class ConfigurationError(RuntimeError):
    """Configuration disagrees with itself or with a stored artifact."""


class InternalError(RuntimeError):
    """An internal invariant did not hold."""


class BenchmarkLoadError(RuntimeError):
    """A benchmark manifest or one of its groups failed validation."""
