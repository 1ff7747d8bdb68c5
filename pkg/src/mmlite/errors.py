"""Exception types raised across the package."""


class MMLiteError(Exception):
    """Base class for all package errors."""


class DimensionError(MMLiteError, ValueError):
    pass


class UnsupportedKernelError(MMLiteError, ValueError):
    pass


class NumericError(MMLiteError, FloatingPointError):
    pass


class TapeError(MMLiteError, RuntimeError):
    """Misuse of a gradient tape (reuse after backward, non-scalar loss)."""


class ContractError(MMLiteError, ValueError):
    pass


class ResolutionError(MMLiteError, ValueError):
    pass


class ConfigError(MMLiteError, ValueError):
    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("invalid config: " + "; ".join(self.violations))


class FormatError(MMLiteError, ValueError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class TrainingError(MMLiteError, RuntimeError):
    pass
