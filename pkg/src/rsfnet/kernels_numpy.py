"""Pure-numpy convolution kernels (im2col / col2im fallback path).

Independent of the JIT path on purpose: the two backends cross-check each
other in the test suite and in benchmarks/bench_kernels.py.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kh, kw, stride, padding):
    """Strided [N, C, OH, OW, KH, KW] view of the zero-padded input."""
    sh, sw = stride
    ph, pw = padding
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::sh, ::sw, :, :]


def forward(x, w, stride, padding):
    c_out, _, kh, kw = w.shape
    win = _windows(x, kh, kw, stride, padding)
    out = np.tensordot(
        win.astype(np.float64), w.astype(np.float64), axes=([1, 4, 5], [1, 2, 3])
    )
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)).astype(x.dtype)


def backward_x(dout, w, x_shape, stride, padding):
    sh, sw = stride
    ph, pw = padding
    n, c_in, h, wid = x_shape
    _, c_out, oh, ow = dout.shape
    kh, kw = w.shape[2], w.shape[3]
    d64 = dout.astype(np.float64)
    w64 = w.astype(np.float64)
    dxp = np.zeros((n, c_in, h + 2 * ph, wid + 2 * pw))
    for u in range(kh):
        for v in range(kw):
            # [N, OH, OW, C_in] contribution of kernel tap (u, v)
            tap = np.tensordot(d64, w64[:, :, u, v], axes=([1], [0]))
            dxp[:, :, u : u + oh * sh : sh, v : v + ow * sw : sw] += tap.transpose(
                0, 3, 1, 2
            )
    dx = dxp[:, :, ph : ph + h, pw : pw + wid]
    return np.ascontiguousarray(dx).astype(dout.dtype)


def backward_w(dout, x, w_shape, stride, padding):
    kh, kw = w_shape[2], w_shape[3]
    win = _windows(x, kh, kw, stride, padding)
    dw = np.tensordot(
        dout.astype(np.float64), win.astype(np.float64), axes=([0, 2, 3], [0, 2, 3])
    )
    return np.ascontiguousarray(dw).astype(dout.dtype)
