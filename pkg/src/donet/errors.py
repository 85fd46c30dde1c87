"""Exception hierarchy shared across the package."""


class DonetError(Exception):
    """Base class for all library errors."""


class ShapeError(DonetError, ValueError):
    pass


class SizeError(DonetError, ValueError):
    pass


class ContractError(DonetError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(DonetError, ValueError):
    pass


class DataError(DonetError):
    pass


class PnmError(DataError, ValueError):
    """Malformed PGM/PPM stream. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class NumericError(DonetError, ArithmeticError):
    """Non-finite loss or failed gradient check."""
