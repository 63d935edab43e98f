"""Pure numpy implementations of the convolution and pooling kernels.

Used when the compiled ``_ckernels`` extension is unavailable, and as the
reference the compiled kernels are tested against. Both backends must agree
bitwise: summation orders below are mirrored in ``_ckernels.pyx``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw):
    """(N, C, H, W) -> (N*OH*OW, C*kh*kw), rows ordered (n, oh, ow)."""
    n, c, h, w = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # (N, C, OH, OW, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols)


def col2im(cols, shape, kh, kw):
    """Adjoint of :func:`im2col`: scatter-add columns back into an image batch."""
    n, c, h, w = shape
    oh, ow = h - kh + 1, w - kw + 1
    blocks = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dx = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + oh, j:j + ow] += blocks[:, :, i, j]
    return dx


def maxpool_forward(x, size):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped.

    Returns the pooled batch and the flat in-window index of each maximum
    (first maximum in row-major window order).
    """
    n, c, h, w = x.shape
    oh, ow = h // size, w // size
    win = x[:, :, :oh * size, :ow * size].reshape(n, c, oh, size, ow, size)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.intp)


def maxpool_backward(dout, arg, shape, size):
    n, c, h, w = shape
    oh, ow = dout.shape[2], dout.shape[3]
    dwin = np.zeros((n, c, oh, ow, size * size), dtype=dout.dtype)
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :, :oh * size, :ow * size] = dwin.reshape(n, c, oh * size, ow * size)
    return dx
