"""Attention-gated CNN for binary histopathology classification, built on a
small numpy autodiff core."""

from .errors import (BroadcastError, ConfigError, ContractError, DataError, HistoAttnError,
                     IoError, NumericError, ShapeError, SplitError)
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "HistoAttnError", "ShapeError", "BroadcastError", "ConfigError",
           "ContractError", "DataError", "SplitError", "IoError", "NumericError", "__version__"]
