"""Backend selection for the hot loops.

The Cython extension is used when it was built; otherwise the numpy
fallback is imported. Setting ``DYNSSD_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("DYNSSD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback

im2col = _impl.im2col
col2im = _impl.col2im
resize_bicubic = _impl.resize_bicubic
nms = _impl.nms

# Dense resampling operators are only needed by the differentiable resize.
resize_matrix = _fallback.resize_matrix
cubic = _fallback.cubic

__all__ = ["BACKEND", "im2col", "col2im", "resize_bicubic", "nms", "resize_matrix", "cubic"]
