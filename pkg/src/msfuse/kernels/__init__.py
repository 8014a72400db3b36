"""Kernel backend selection.

Two interchangeable implementations of the conv/pool inner loops exist:
a compiled Cython core and a pure NumPy fallback. The active backend is
chosen once at import time:

* ``MSFUSE_KERNELS=compiled`` forces the Cython core (ImportError if the
  extension was not built);
* ``MSFUSE_KERNELS=python`` forces the NumPy fallback;
* ``MSFUSE_KERNELS=auto`` (default) uses the NumPy fallback, which wins
  on the convolution sizes this package actually runs (it lowers to BLAS
  matmuls; see benchmarks/bench_kernels.py), and only exists as "auto"
  so the policy can change without touching call sites.

Backends are numerically interchangeable but not guaranteed bit-identical
to each other (different summation orders); determinism guarantees hold
per backend.
"""

import os

from . import _fallback

_REQUESTED = os.environ.get("MSFUSE_KERNELS", "auto").lower()

if _REQUESTED == "compiled":
    from . import _core as _impl
elif _REQUESTED == "python":
    _impl = _fallback
elif _REQUESTED == "auto":
    _impl = _fallback
else:
    raise ImportError(f"MSFUSE_KERNELS must be auto, compiled or python, got {_REQUESTED!r}")


def load_backend(name):
    """Return a specific backend module by name (for benchmarks/tests)."""
    if name == "python":
        return _fallback
    if name == "compiled":
        from . import _core

        return _core
    raise ValueError(f"unknown kernel backend {name!r}")


BACKEND_NAME = _impl.BACKEND_NAME
conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
maxpool2x2_forward = _impl.maxpool2x2_forward
maxpool2x2_backward = _impl.maxpool2x2_backward
