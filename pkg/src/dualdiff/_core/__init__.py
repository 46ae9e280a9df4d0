"""Hot convolution kernels.

The compiled extension is used when it was built and ``DUALDIFF_PURE_PYTHON``
is unset; otherwise the numpy fallback is selected. ``BACKEND`` names the
active implementation.
"""
import os

from . import _fallback

fallback_im2col3x3 = _fallback.im2col3x3
fallback_col2im3x3 = _fallback.col2im3x3

try:
    if os.environ.get("DUALDIFF_PURE_PYTHON"):
        raise ImportError("pure-python backend requested")
    from . import _kernels
except ImportError:
    _kernels = None

if _kernels is not None:
    im2col3x3 = _kernels.im2col3x3
    col2im3x3 = _kernels.col2im3x3
    BACKEND = "compiled"
else:
    im2col3x3 = _fallback.im2col3x3
    col2im3x3 = _fallback.col2im3x3
    BACKEND = "python"

__all__ = ["im2col3x3", "col2im3x3", "BACKEND", "fallback_im2col3x3", "fallback_col2im3x3"]
