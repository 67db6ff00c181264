"""Teacher-student place recognition with cross-metric distillation on a numpy autodiff core."""

from tscm.errors import ConfigError, DataError, NumericError, TSCMError
from tscm.tensor import Tensor, grad_check, no_grad

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "NumericError", "TSCMError", "Tensor", "grad_check", "no_grad", "__version__"]
