class MiAEError(Exception):
    """Base class for all package errors."""


class ParseError(MiAEError):
    pass


class DegenerateFrameError(MiAEError):
    def __init__(self, message, residue=None):
        super().__init__(message)
        self.residue = residue


class InvalidTransformError(MiAEError):
    pass


class ShapeError(MiAEError, ValueError):
    pass


class InvalidMaskError(MiAEError, ValueError):
    pass


class LengthError(MiAEError, ValueError):
    pass


class DomainError(MiAEError, ValueError):
    pass


class StepError(MiAEError):
    def __init__(self, message, sample_id=None):
        super().__init__(message)
        self.sample_id = sample_id


class LabelError(MiAEError, ValueError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SplitError(MiAEError, ValueError):
    pass


class ProbeError(MiAEError, ValueError):
    pass


class ConfigError(MiAEError, ValueError):
    pass
