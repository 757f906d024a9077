"""Exception types shared across the package.

The CLI maps each family onto a stable exit code (see ``livepad.cli``).
"""


class UsageError(ValueError):
    """Caller supplied arguments that violate an operation's preconditions."""


class ProtocolError(ValueError):
    """A dataset or run violates the live+synthetic training protocol."""


class DegenerateInputError(ValueError):
    """Input is well-typed but numerically degenerate (e.g. a zero vector)."""
