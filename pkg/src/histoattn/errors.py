"""Exception hierarchy shared by every module."""


class HistoAttnError(Exception):
    """Base class for all package errors."""


class ShapeError(HistoAttnError, ValueError):
    pass


class BroadcastError(ShapeError):
    pass


class ConfigError(HistoAttnError, ValueError):
    pass


class ContractError(HistoAttnError, RuntimeError):
    """A caller broke an API precondition (e.g. backward from a non-scalar)."""


class DataError(HistoAttnError, ValueError):
    pass


class SplitError(DataError):
    pass


class IoError(HistoAttnError, OSError):
    pass


class NumericError(HistoAttnError, ArithmeticError):
    """Raised when a loss or parameter becomes NaN/Inf."""
