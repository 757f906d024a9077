"""Contactless fingerprint presentation attack detection on a numpy autodiff core."""

from .errors import DegenerateInputError, ProtocolError, UsageError
from .kernels import backend
from .tensor import ConfigurationError, DimensionError, NumericError, Tensor, grad_check

__version__ = "0.1.0"
