"""Exception hierarchy shared by every module."""


class IDGANError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(IDGANError, ValueError):
    pass


class InvalidConfigError(IDGANError, ValueError):
    """Raised for inconsistent configuration; ``field`` names the offending path."""

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class InvalidStateError(IDGANError, RuntimeError):
    pass


class ShapeError(IDGANError, ValueError):
    pass


class FormatError(IDGANError):
    """A persisted file is corrupt; ``section`` names where parsing failed."""

    def __init__(self, message, section=None):
        self.section = section
        if section is not None:
            message = f"[{section}] {message}"
        super().__init__(message)


class UnsupportedMetricError(IDGANError):
    pass


class DegenerateEncoderError(IDGANError):
    pass


class TrainingDivergenceError(IDGANError, FloatingPointError):
    def __init__(self, message, step=None, term=None):
        self.step = step
        self.term = term
        super().__init__(f"step {step}, term {term!r}: {message}")


class TrainingFailureError(IDGANError, RuntimeError):
    def __init__(self, message, details=None):
        self.details = details
        super().__init__(message)
