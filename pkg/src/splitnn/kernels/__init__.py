"""Training-kernel backend selection.

The hot inner loop (per-batch forward/backward/SGD over an epoch) exists
twice: a Cython extension (splitnn.kernels._fast) and a pure-numpy
fallback with identical call signatures. The compiled kernel is used when
importable; set SPLITNN_BACKEND=numpy|cython to force one (forcing cython
raises if the extension was not built). benchmarks/bench_kernels.py
compares the two.
"""

import os

from . import numpy_backend

try:
    from . import _fast as cython_backend
except ImportError:
    cython_backend = None

_BACKENDS = {"numpy": numpy_backend}
if cython_backend is not None:
    _BACKENDS["cython"] = cython_backend


def available_backends():
    return sorted(_BACKENDS)


def resolve_backend(name="auto"):
    """Map a requested backend name to a kernel module."""
    if name in (None, "auto"):
        return _BACKENDS.get("cython", numpy_backend)
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(
            f"backend {name!r} not available (have: {', '.join(available_backends())})"
        ) from None


_active = resolve_backend(os.environ.get("SPLITNN_BACKEND", "auto"))


def get_backend():
    return _active


def use_backend(name):
    """Switch the process-wide backend; returns the previous module."""
    global _active
    previous = _active
    _active = resolve_backend(name)
    return previous
