"""Reverse-mode differentiation over numpy arrays."""
from .tensor import (FrozenTensorError, NonFiniteError, Tape, Tensor, as_tensor,
                     backward, make_result, recording)
from .ops import *  # noqa: F401,F403
from .ops import __all__ as _ops_all
from .gradcheck import GradCheckResult, finite_diff_check

__all__ = ["Tensor", "Tape", "backward", "as_tensor", "make_result", "recording",
           "NonFiniteError", "FrozenTensorError", "finite_diff_check",
           "GradCheckResult", *_ops_all]
