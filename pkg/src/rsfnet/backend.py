"""Selects the convolution backend: numba JIT kernels or the numpy fallback.

Set RSF_BACKEND=numpy to force the pure-numpy path (the default is numba
when importable). RSF_THREADS caps numba's thread pool; the shipped kernels
are single-threaded loops so results are bit-identical either way.
"""

import os

from . import kernels_numpy

_FORCED = os.environ.get("RSF_BACKEND", "").strip().lower()
if _FORCED not in ("", "numba", "numpy"):
    raise RuntimeError(f"RSF_BACKEND must be 'numba' or 'numpy', got {_FORCED!r}")

_kernels_numba = None
if _FORCED != "numpy":
    try:
        from . import kernels_numba as _kernels_numba
    except ImportError:
        if _FORCED == "numba":
            raise
        _kernels_numba = None

if _kernels_numba is not None:
    _threads = os.environ.get("RSF_THREADS", "").strip()
    if _threads:
        import numba

        numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))

_active = _kernels_numba if _kernels_numba is not None else kernels_numpy


def active_backend() -> str:
    """Name of the backend in use: 'numba' or 'numpy'."""
    return "numba" if _active is not kernels_numpy else "numpy"


def get_kernels(name: str | None = None):
    """Kernel module for `name` ('numba'/'numpy'), or the active one."""
    if name is None:
        return _active
    if name == "numpy":
        return kernels_numpy
    if name == "numba":
        if _kernels_numba is None:
            from . import kernels_numba

            return kernels_numba
        return _kernels_numba
    raise ValueError(f"unknown backend {name!r}")


def conv2d_forward(x, w, stride, padding):
    return _active.forward(x, w, stride, padding)


def conv2d_backward_x(dout, w, x_shape, stride, padding):
    return _active.backward_x(dout, w, x_shape, stride, padding)


def conv2d_backward_w(dout, x, w_shape, stride, padding):
    return _active.backward_w(dout, x, w_shape, stride, padding)
