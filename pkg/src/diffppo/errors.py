"""Shared exception types."""


class DiffPPOError(Exception):
    pass


class NonFiniteValue(DiffPPOError):
    """An operation produced NaN/Inf."""


class ShapeError(DiffPPOError):
    pass


class DomainError(DiffPPOError):
    pass


class ConfigError(DiffPPOError):
    pass


class MonitorError(DiffPPOError):
    pass


class SamplerDiverged(DiffPPOError):
    pass


class InsufficientData(DiffPPOError):
    pass
