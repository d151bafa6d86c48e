"""Exception hierarchy. Each top-level class carries the CLI exit code it maps to."""


class GridpostError(Exception):
    exit_code = 1


class ConfigError(GridpostError, ValueError):
    exit_code = 2


class DataIOError(GridpostError, OSError):
    exit_code = 3


class FormatError(DataIOError):
    """Malformed binary payload; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BundleError(GridpostError):
    exit_code = 4


class PairingError(GridpostError):
    exit_code = 5


class DimensionError(GridpostError, ValueError):
    exit_code = 2


class DomainError(GridpostError, ValueError):
    exit_code = 2


class DataError(GridpostError, ValueError):
    exit_code = 3


class NumericError(GridpostError, FloatingPointError):
    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"{message} (layer {layer_index})"
        super().__init__(message)
        self.layer_index = layer_index


class TrainingError(NumericError):
    pass


class EvaluationError(GridpostError):
    exit_code = 5
