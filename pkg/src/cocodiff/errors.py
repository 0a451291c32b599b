"""Exception types raised across the package."""


class CocoDiffError(Exception):
    """Base class for all package errors."""


class ConfigError(CocoDiffError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ParseError(CocoDiffError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class ShapeError(CocoDiffError, ValueError):
    def __init__(self, axis, expected, got):
        self.axis = axis
        super().__init__(f"shape mismatch on axis '{axis}': expected {expected}, got {got}")


class EncodingError(CocoDiffError, ValueError):
    pass


class ProjectionError(CocoDiffError, ArithmeticError):
    pass


class TrainingError(CocoDiffError, RuntimeError):
    def __init__(self, message, epoch=None, batch=None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"{message} (epoch={epoch}, batch={batch})")


class MetricError(CocoDiffError, ValueError):
    pass
