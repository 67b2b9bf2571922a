"""Exception types raised across the package."""


class DPAdapterError(Exception):
    """Base class for all package errors."""


class ShapeError(DPAdapterError, ValueError):
    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class InputError(DPAdapterError, ValueError):
    pass


class StateError(DPAdapterError, RuntimeError):
    pass


class DomainError(DPAdapterError, ValueError):
    pass


class ConfigError(DPAdapterError, ValueError):
    pass


class CalibrationError(DPAdapterError, RuntimeError):
    pass


class DegenerateInputError(DPAdapterError, ValueError):
    pass


class PreconditionError(DPAdapterError, ValueError):
    pass


class FormatError(DPAdapterError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SchemaError(DPAdapterError, ValueError):
    pass


class BudgetExceededError(DPAdapterError, RuntimeError):
    pass
