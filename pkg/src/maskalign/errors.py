"""Exception hierarchy shared by every subsystem."""


class MaskAlignError(Exception):
    """Base class for all library errors."""


class ShapeError(MaskAlignError, ValueError):
    pass


class DomainError(MaskAlignError, ValueError):
    pass


class NumericError(MaskAlignError, FloatingPointError):
    """Non-finite value; ``step`` is the optimizer step index when known."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ContractError(MaskAlignError, RuntimeError):
    pass


class CapacityError(MaskAlignError, ValueError):
    pass


class ParseError(MaskAlignError, ValueError):
    pass


class GenerationError(MaskAlignError, RuntimeError):
    """Decoder output could not be parsed; ``tokens`` holds the raw ids."""

    def __init__(self, message, tokens=()):
        super().__init__(message)
        self.tokens = list(tokens)


class ConfigError(MaskAlignError, ValueError):
    pass


class CorruptionError(MaskAlignError, IOError):
    pass


class VersionError(MaskAlignError, IOError):
    pass


class CompatibilityError(MaskAlignError, ValueError):
    pass


class StageOrderError(MaskAlignError, RuntimeError):
    pass


class UsageError(MaskAlignError, ValueError):
    pass
