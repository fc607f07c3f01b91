class D2ACError(Exception):
    """Base class for engine errors."""


class ConfigError(D2ACError, ValueError):
    pass


class ConfigParseError(ConfigError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DimensionError(D2ACError, ValueError):
    pass


class UsageError(D2ACError, RuntimeError):
    pass


class TrainingError(D2ACError, RuntimeError):
    """Raised on non-finite losses or gradients during optimization."""


class ModelError(D2ACError, RuntimeError):
    pass
