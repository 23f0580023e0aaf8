"""Exception types raised across the package."""


class SparsePoseError(Exception):
    pass


class ConfigurationError(SparsePoseError, ValueError):
    pass


class InvalidGeometryError(SparsePoseError, ValueError):
    pass


class ShapeError(SparsePoseError, ValueError):
    pass


class InputSizeError(SparsePoseError, ValueError):
    pass


class NumericError(SparsePoseError, ArithmeticError):
    """A loss term or intermediate became non-finite."""

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class DataError(SparsePoseError, ValueError):
    def __init__(self, message, record_id=None):
        if record_id is not None:
            message = f"{message} (record {record_id})"
        super().__init__(message)
        self.record_id = record_id


class CheckpointError(SparsePoseError, RuntimeError):
    pass


class ConfigConflictError(CheckpointError):
    pass
