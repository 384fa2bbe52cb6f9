"""Kernel dispatch: compiled extension when importable, NumPy fallback otherwise.

Set ``LSPLAB_PURE_PYTHON=1`` to force the fallback, or call :func:`set_backend`.
"""
import os

import numpy as np

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _fallback}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled

_impl = _fallback


def available_backends():
    return sorted(_BACKENDS)


def backend() -> str:
    return "cython" if _impl is _compiled and _compiled is not None else "python"


def set_backend(name: str) -> None:
    global _impl
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {available_backends()}")
    _impl = _BACKENDS[name]


if _compiled is not None and not os.environ.get("LSPLAB_PURE_PYTHON"):
    set_backend("cython")


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x, w, b, pad):
    return _impl.conv2d_forward(_c(x), _c(w), _c(b), int(pad))


def conv2d_backward(x, w, dout, pad, need_dx=True, need_dw=True):
    return _impl.conv2d_backward(_c(x), _c(w), _c(dout), int(pad), need_dx, need_dw)


def maxpool2_forward(x):
    return _impl.maxpool2_forward(_c(x))


def maxpool2_backward(dout, idx, input_shape):
    return _impl.maxpool2_backward(_c(dout), np.ascontiguousarray(idx, dtype=np.int8), tuple(input_shape))
