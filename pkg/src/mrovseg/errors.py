"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration and contract problems exit
with 2, numeric failures with 3 and I/O failures with 4.
"""


class MROVSegError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MROVSegError, ValueError):
    """Operand shapes do not satisfy an operation's dimension contract."""


class LayoutError(MROVSegError, ValueError):
    """A slice layout cannot be planned for the requested crop ratio."""


class ContractError(MROVSegError, ValueError):
    """A precondition on an argument's value (not its shape) was violated."""


class ConfigError(MROVSegError, ValueError):
    """A configuration is invalid or inconsistent."""


class NumericError(MROVSegError, ArithmeticError):
    """Non-finite values appeared where finite values are required."""


class IOFailure(MROVSegError, OSError):
    """A file could not be read, parsed or written."""
