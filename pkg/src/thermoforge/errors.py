"""Shared exception types.

Validation failures are ValueErrors so callers relying on stdlib semantics
still catch them; structural graph problems get their own subclass because
the CLI reports them differently from plain bad arguments.
"""


class ValidationError(ValueError):
    """Bad argument values: out-of-range sizes, malformed inputs, unit errors."""


class StructureError(ValidationError):
    """Graph-shape problems: cycles in parent arrays, dangling junction refs."""


class SizeError(ValidationError):
    """A requested search space exceeds its hard cap."""


class DivergenceError(RuntimeError):
    """Numerical integration produced a non-finite state."""
