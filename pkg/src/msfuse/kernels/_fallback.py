"""Pure NumPy kernels for 2-D convolution and 2x2 max pooling.

All arrays are float64 in NHWC layout. These implementations are the
reference semantics; the compiled core in ``_core.pyx`` must match them
(same padding rules, same argmax tie-breaking: first maximum in row-major
window order).
"""

import numpy as np

BACKEND_NAME = "python"


def conv2d_forward(x, w, b, stride=1, pad=0):
    """Cross-correlation of NHWC input with (kh, kw, cin, cout) filters.

    Output spatial size is floor((H + 2*pad - kh) / stride) + 1.
    """
    n, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels, filter expects {wcin}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} does not fit padded input {h + 2 * pad}x{wd + 2 * pad}"
        )
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    y = np.zeros((n, ho, wo, cout))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i : i + ho * stride : stride, j : j + wo * stride : stride, :]
            y += patch @ w[i, j]
    return y + b


def conv2d_backward(x, w, dy, stride=1, pad=0):
    """Gradients of conv2d_forward w.r.t. input, filters, and bias."""
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    _, ho, wo, _ = dy.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i : i + ho * stride : stride, j : j + wo * stride : stride, :]
            dw[i, j] = np.tensordot(patch, dy, axes=([0, 1, 2], [0, 1, 2]))
            dxp[:, i : i + ho * stride : stride, j : j + wo * stride : stride, :] += (
                dy @ w[i, j].T
            )
    db = dy.sum(axis=(0, 1, 2))
    dx = dxp[:, pad : pad + h, pad : pad + wd, :] if pad else dxp
    return dx, dw, db


def maxpool2x2_forward(x):
    """2x2 max pool with stride 2; odd dims are padded with -inf.

    Returns (y, argmax) where argmax holds the winning in-window offset
    (row-major 0..3) per output cell, for exact gradient routing.
    """
    n, h, w, c = x.shape
    hp, wp = h + (h % 2), w + (w % 2)
    if (hp, wp) != (h, w):
        xp = np.full((n, hp, wp, c), -np.inf)
        xp[:, :h, :w, :] = x
    else:
        xp = x
    windows = np.stack(
        [xp[:, 0::2, 0::2, :], xp[:, 0::2, 1::2, :], xp[:, 1::2, 0::2, :], xp[:, 1::2, 1::2, :]]
    )
    argmax = windows.argmax(axis=0).astype(np.int8)
    y = np.take_along_axis(windows, argmax[None].astype(np.intp), axis=0)[0]
    return y, argmax


def maxpool2x2_backward(x_shape, argmax, dy):
    """Route pooled gradients back to the argmax positions."""
    n, h, w, c = x_shape
    hp, wp = h + (h % 2), w + (w % 2)
    dxp = np.zeros((n, hp, wp, c))
    views = [dxp[:, 0::2, 0::2, :], dxp[:, 0::2, 1::2, :], dxp[:, 1::2, 0::2, :], dxp[:, 1::2, 1::2, :]]
    for k, view in enumerate(views):
        view += np.where(argmax == k, dy, 0.0)
    return dxp[:, :h, :w, :]
