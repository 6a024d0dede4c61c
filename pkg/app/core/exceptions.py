class LexShortError(Exception):
    """Base error of the toolkit. `exit_code` is what the CLI returns for it."""

    exit_code = 3
    http_status = 500

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class ConfigError(LexShortError):
    """Invalid configuration or command usage."""

    exit_code = 1
    http_status = 400


class DataError(LexShortError):
    """Malformed, missing or degenerate input data."""

    exit_code = 2
    http_status = 400


class CheckpointError(DataError):
    """Unreadable checkpoint or incompatible checkpoint set."""


class NumericalError(LexShortError):
    """Non-finite values, divergence or failed numerical preconditions."""

    exit_code = 3


class ShapeError(NumericalError):
    """Dimension mismatch between operands."""

    def __init__(self, message: str, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = shapes


class TapeError(NumericalError):
    """Misuse of the computation record (non-scalar loss, repeated backward)."""
