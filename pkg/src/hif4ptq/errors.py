"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class Hif4PtqError(Exception):
    exit_code = 1


class ConfigError(Hif4PtqError, ValueError):
    exit_code = 2


class InvalidFormatError(ConfigError):
    """Bad exponent/mantissa split for a 4-bit code set."""


class InputError(Hif4PtqError, ValueError):
    """Non-finite, negative or empty input where the contract forbids it."""


class ShapeError(Hif4PtqError, ValueError):
    """Dimension, descriptor or mask length mismatch."""


class MaskError(ShapeError):
    pass


class AccumulatorError(Hif4PtqError, ValueError):
    pass


class CoverageError(Hif4PtqError):
    exit_code = 3

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class StateFormatError(Hif4PtqError):
    exit_code = 4


class UnsupportedVersionError(StateFormatError):
    pass


class CorruptionError(Hif4PtqError):
    exit_code = 5


class StateError(Hif4PtqError):
    exit_code = 6


class IntegrityError(StateError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer
