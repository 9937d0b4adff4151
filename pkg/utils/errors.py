from typing import Optional


class AlpcError(ValueError):
    """Base class for every contract violation raised by the engine."""


class CloudFormatError(AlpcError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class QueryError(AlpcError):
    pass


class GeometryError(AlpcError):
    pass


class RegionError(AlpcError):
    pass


class TrainingError(AlpcError):
    pass


class BudgetError(AlpcError):
    pass


class MetricError(AlpcError):
    pass


class ConfigError(AlpcError):
    pass
