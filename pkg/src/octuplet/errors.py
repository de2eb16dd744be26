"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures to distinct
process exit statuses without a lookup table.
"""


class OctupletError(Exception):
    exit_code = 1


class DomainError(OctupletError, ValueError):
    """Input outside the mathematical domain (zero vector, no valid negative, ...)."""

    exit_code = 4


class ShapeError(OctupletError, ValueError):
    """Mismatched dimensions or out-of-range indices."""

    exit_code = 4


class ProtocolError(OctupletError, ValueError):
    """A batch or pair protocol violates its structural contract."""

    exit_code = 3


class ConfigError(OctupletError, ValueError):
    exit_code = 2


class DataError(OctupletError, OSError):
    """Unreadable or missing dataset, protocol or checkpoint files."""

    exit_code = 3


class NumericError(OctupletError, ArithmeticError):
    """Non-finite loss or parameters during training."""

    exit_code = 5
