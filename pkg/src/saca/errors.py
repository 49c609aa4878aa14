"""Exception hierarchy shared across the package."""


class SacaError(Exception):
    """Base class for all package errors."""


class SmilesError(SacaError, ValueError):
    pass


class SmilesSyntaxError(SmilesError):
    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


class MultiComponentError(SmilesError):
    pass


class ValenceError(SmilesError):
    pass


class PatternTooLarge(SacaError, ValueError):
    pass


class VocabSyntaxError(SacaError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ShapeError(SacaError, ValueError):
    pass


class NonFiniteError(SacaError, FloatingPointError):
    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class ConfigError(SacaError, ValueError):
    pass


class HeaderError(SacaError, ValueError):
    pass


class EmptyDatasetError(SacaError, ValueError):
    pass


class SingleClassError(SacaError, ValueError):
    pass


class NoCollisionPairFound(SacaError, LookupError):
    pass


class CheckpointError(SacaError, ValueError):
    pass
