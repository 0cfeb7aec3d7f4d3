"""Exception types shared across the package."""


class ContradictionError(RuntimeError):
    """The evidence assigns zero total probability (partition function Z = 0)."""


class FormatError(ValueError):
    """A binary payload failed to parse.

    ``offset`` is the byte position at which the fault was detected, when
    known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EnumerationBudgetError(RuntimeError):
    """An exact-enumeration request exceeds the configured budget."""


class MalformedCircuitError(ValueError):
    """Graph defect (dangling child id, order violation) that prevents evaluation."""
