"""Backend selection for the convolution/pooling kernels.

The compiled extension is used when it imports; set ``QBDC_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("QBDC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        pass


def im2col(x, kh, kw):
    return _impl.im2col(np.ascontiguousarray(x), kh, kw)


def col2im(cols, shape, kh, kw):
    return _impl.col2im(np.ascontiguousarray(cols), tuple(shape), kh, kw)


def maxpool_forward(x, size):
    return _impl.maxpool_forward(np.ascontiguousarray(x), size)


def maxpool_backward(dout, arg, shape, size):
    return _impl.maxpool_backward(np.ascontiguousarray(dout), np.ascontiguousarray(arg),
                                  tuple(shape), size)
