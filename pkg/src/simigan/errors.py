"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class ParseError(ValueError):
    """A file could not be decoded; the message carries location context."""


class ConfigError(ValueError):
    """A configuration document is invalid; the message names the field."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss; carries the offending report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
