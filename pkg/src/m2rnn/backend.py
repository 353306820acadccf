"""Kernel backend selection.

The compiled extension is preferred; the pure NumPy twin is the fallback.
``M2RNN_BACKEND=python`` or ``=compiled`` forces a choice (forcing
``compiled`` when the extension is missing raises at import). Both backends
honour the same fixed-summation-order contract and are bit-identical.
"""

import os

import numpy as np

from . import _pykernels

_requested = os.environ.get("M2RNN_BACKEND", "").strip().lower()
if _requested not in ("", "compiled", "python"):
    raise RuntimeError(f"M2RNN_BACKEND must be 'compiled' or 'python', got {_requested!r}")

try:
    from . import _kernels
except ImportError:
    _kernels = None

if _requested == "compiled" and _kernels is None:
    raise RuntimeError("M2RNN_BACKEND=compiled but the extension is not built")

if _requested == "python":
    _impl = _pykernels
else:
    _impl = _kernels if _kernels is not None else _pykernels

HAS_COMPILED = _kernels is not None
BACKEND_NAME = _impl.NAME


def get_impl(name=None):
    """Return a kernel implementation module by name (default: selected)."""
    if name is None:
        return _impl
    if name == "python":
        return _pykernels
    if name == "compiled":
        if _kernels is None:
            raise RuntimeError("compiled backend is not available")
        return _kernels
    raise ValueError(f"unknown backend {name!r}")


def _c64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a, b, impl=None):
    impl = impl or _impl
    return impl.matmul(_c64(a), _c64(b))


def _elementwise(map_fn, x):
    arr = _c64(x)
    out = np.empty_like(arr)
    map_fn(arr.ravel(), out.ravel())
    return out


def tanh(x, impl=None):
    return _elementwise((impl or _impl).tanh_map, x)


def sigmoid(x, impl=None):
    return _elementwise((impl or _impl).sigmoid_map, x)


def silu(x, impl=None):
    return _elementwise((impl or _impl).silu_map, x)


def exp(x, impl=None):
    return _elementwise((impl or _impl).exp_map, x)


def log(x, impl=None):
    return _elementwise((impl or _impl).log_map, x)


def log1p(x, impl=None):
    return _elementwise((impl or _impl).log1p_map, x)


def scan_forward(Q, K, V, F, H0, W, impl=None):
    impl = impl or _impl
    return impl.scan_forward(_c64(Q), _c64(K), _c64(V), _c64(F), _c64(H0), _c64(W))


def scan_forward_cached(Q, K, V, F, H0, W, impl=None):
    impl = impl or _impl
    return impl.scan_forward_cached(_c64(Q), _c64(K), _c64(V), _c64(F), _c64(H0), _c64(W))


def scan_backward(Q, K, V, F, H0, W, Hfull, dY, clip, impl=None):
    impl = impl or _impl
    return impl.scan_backward(_c64(Q), _c64(K), _c64(V), _c64(F), _c64(H0), _c64(W),
                              _c64(Hfull), _c64(dY), float(clip))
