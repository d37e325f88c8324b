"""Error hierarchy shared by the library, the CLI and the run service.

Each class carries the process exit code the CLI returns when it escapes.
"""


class PixelclError(Exception):
    exit_code = 1


class ConfigError(PixelclError):
    """Invalid configuration, plan or stage dependency."""
    exit_code = 2


class ArgumentError(PixelclError, ValueError):
    """Bad argument to a library operation."""
    exit_code = 2


class DataError(PixelclError):
    exit_code = 3


class GenerationError(DataError):
    """Scene packing failed after the bounded number of retries."""


class FormatError(DataError):
    """Corrupt, truncated or mismatched binary container."""


class NumericError(PixelclError, ArithmeticError):
    exit_code = 4


class InternalError(PixelclError, IndexError):
    exit_code = 1
