"""JIT-compiled direct convolution kernels (the hot inner loops).

All kernels accumulate in float64 regardless of the storage dtype so that
the numba and numpy backends agree to within rounding of a single cast.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def conv2d_fwd(x, w, sh, sw, ph, pw, out):
    n_batch, c_in, h, wid = x.shape
    c_out = w.shape[0]
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = out.shape[2], out.shape[3]
    for n in range(n_batch):
        for co in range(c_out):
            for i in range(oh):
                i0 = i * sh - ph
                for j in range(ow):
                    j0 = j * sw - pw
                    acc = 0.0
                    for ci in range(c_in):
                        for u in range(kh):
                            iy = i0 + u
                            if iy < 0 or iy >= h:
                                continue
                            for v in range(kw):
                                ix = j0 + v
                                if ix < 0 or ix >= wid:
                                    continue
                                acc += x[n, ci, iy, ix] * w[co, ci, u, v]
                    out[n, co, i, j] = acc
    return out


@njit(cache=True)
def conv2d_bwd_x(dout, w, sh, sw, ph, pw, dx):
    n_batch, c_in, h, wid = dx.shape
    c_out = w.shape[0]
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = dout.shape[2], dout.shape[3]
    for n in range(n_batch):
        for ci in range(c_in):
            for iy in range(h):
                for ix in range(wid):
                    acc = 0.0
                    for co in range(c_out):
                        for u in range(kh):
                            num = iy + ph - u
                            if num < 0 or num % sh != 0:
                                continue
                            i = num // sh
                            if i >= oh:
                                continue
                            for v in range(kw):
                                den = ix + pw - v
                                if den < 0 or den % sw != 0:
                                    continue
                                j = den // sw
                                if j >= ow:
                                    continue
                                acc += dout[n, co, i, j] * w[co, ci, u, v]
                    dx[n, ci, iy, ix] = acc
    return dx


@njit(cache=True)
def conv2d_bwd_w(dout, x, sh, sw, ph, pw, dw):
    n_batch, c_in, h, wid = x.shape
    c_out = dw.shape[0]
    kh, kw = dw.shape[2], dw.shape[3]
    oh, ow = dout.shape[2], dout.shape[3]
    for co in range(c_out):
        for ci in range(c_in):
            for u in range(kh):
                for v in range(kw):
                    acc = 0.0
                    for n in range(n_batch):
                        for i in range(oh):
                            iy = i * sh - ph + u
                            if iy < 0 or iy >= h:
                                continue
                            for j in range(ow):
                                ix = j * sw - pw + v
                                if ix < 0 or ix >= wid:
                                    continue
                                acc += dout[n, co, i, j] * x[n, ci, iy, ix]
                    dw[co, ci, u, v] = acc
    return dw


def forward(x, w, stride, padding):
    sh, sw = stride
    ph, pw = padding
    n, _, h, wid = x.shape
    c_out, _, kh, kw = w.shape
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wid + 2 * pw - kw) // sw + 1
    out = np.empty((n, c_out, oh, ow), dtype=x.dtype)
    conv2d_fwd(x, w, sh, sw, ph, pw, out)
    return out


def backward_x(dout, w, x_shape, stride, padding):
    dx = np.empty(x_shape, dtype=dout.dtype)
    conv2d_bwd_x(dout, w, stride[0], stride[1], padding[0], padding[1], dx)
    return dx


def backward_w(dout, x, w_shape, stride, padding):
    dw = np.empty(w_shape, dtype=dout.dtype)
    conv2d_bwd_w(dout, x, stride[0], stride[1], padding[0], padding[1], dw)
    return dw
