"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Shapes, indices or distributions that violate an operation's contract."""


class NumericError(ArithmeticError):
    """NaN/Inf encountered where finite values are required."""


class ProtocolError(RuntimeError):
    """Registry or transport misuse (unknown endpoint, duplicate id, ...)."""


class NoSkeletonFits(RuntimeError):
    """No skeleton in the library satisfies the device constraints."""


class ConfigError(ValueError):
    """Invalid experiment configuration; carries the offending line when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
