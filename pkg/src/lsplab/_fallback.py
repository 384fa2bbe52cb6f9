"""Pure NumPy versions of the convolution and pooling kernels (im2col + GEMM).

Layout is NHWC throughout; conv weights are (KH, KW, C_in, C_out).
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x, kh, kw, pad):
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # N, Ho, Wo, C, kh, kw
    n, ho, wo, c = win.shape[:4]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c), (n, ho, wo)


def conv2d_forward(x, w, b, pad):
    kh, kw, cin, cout = w.shape
    cols, (n, ho, wo) = _im2col(x, kh, kw, pad)
    out = cols @ w.reshape(kh * kw * cin, cout)
    out += b
    return out.reshape(n, ho, wo, cout)


def conv2d_backward(x, w, dout, pad, need_dx=True, need_dw=True):
    """Gradients (dx, dw, db) of a stride-1 convolution; unneeded ones come back as None."""
    kh, kw, cin, cout = w.shape
    dx = dw = None
    db = dout.sum(axis=(0, 1, 2)) if need_dw else None
    if need_dw:
        cols, _ = _im2col(x, kh, kw, pad)
        dw = (cols.T @ dout.reshape(-1, cout)).reshape(kh, kw, cin, cout)
    if need_dx:
        # full correlation of dout with the spatially flipped, channel-transposed kernel
        w_t = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
        full = conv2d_forward(dout, w_t, np.zeros(cin), kh - 1 - pad)
        dx = full[:, :x.shape[1], :x.shape[2], :]
    return dx, dw, db


def maxpool2_forward(x):
    """2x2 stride-2 max pooling; returns (out, argmax) with argmax in 0..3 (row-major in the window)."""
    n, h, w, c = x.shape
    x = x[:, :h - h % 2, :w - w % 2, :]
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int8)


def maxpool2_backward(dout, idx, input_shape):
    n, h, w, c = input_shape
    win = np.zeros((n, h // 2, w // 2, c, 4))
    np.put_along_axis(win, idx[..., None].astype(np.intp), dout[..., None], axis=-1)
    dx = np.zeros((n, h, w, c))
    dx[:, :h - h % 2, :w - w % 2, :] = (win.reshape(n, h // 2, w // 2, c, 2, 2)
                                        .transpose(0, 1, 4, 2, 5, 3).reshape(n, h - h % 2, w - w % 2, c))
    return dx
