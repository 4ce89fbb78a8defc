"""Exception types shared across the package."""


class TokencastError(Exception):
    """Base class for all package errors."""


class ConfigError(TokencastError):
    """Invalid configuration: bad sizes, ratios, ranges, or missing inputs."""


class DomainError(TokencastError):
    """An id or value outside the domain an operation accepts."""


class ScheduleError(TokencastError):
    """The token-stream cursor or producer rule was violated."""


class CheckpointError(TokencastError):
    """Malformed or incompatible checkpoint file."""


class MeasurementError(TokencastError):
    """The timing environment cannot support the requested measurement."""
