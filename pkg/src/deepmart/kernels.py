"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``DEEPMART_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _purepy

_FORCE_PURE = os.environ.get("DEEPMART_PURE_PYTHON", "") not in ("", "0")

try:
    if _FORCE_PURE:
        raise ImportError("fallback forced by DEEPMART_PURE_PYTHON")
    from . import _kernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _purepy
    BACKEND = "numpy"

euler_gbm = _impl.euler_gbm
exact_gbm = _impl.exact_gbm
euler_affine = _impl.euler_affine
bias_bounded_relu = _impl.bias_bounded_relu
bounded_relu_grad = _impl.bounded_relu_grad
stochastic_integral = _impl.stochastic_integral
recursive_upper = _impl.recursive_upper

__all__ = [
    "BACKEND",
    "euler_gbm",
    "exact_gbm",
    "euler_affine",
    "bias_bounded_relu",
    "bounded_relu_grad",
    "stochastic_integral",
    "recursive_upper",
]
