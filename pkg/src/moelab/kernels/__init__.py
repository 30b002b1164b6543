"""Hot numeric kernels with switchable backends.

The numba backend is used when importable; set ``MOELAB_BACKEND=numpy``
(or ``numba``) to force one.  Both backends are deterministic on a fixed
platform; cross-backend results agree to ~1e-12, not bit-for-bit, so
bit-reproducibility contracts hold per backend.
"""

import os

_KERNEL_NAMES = (
    "softmax2d",
    "masked_softmax2d",
    "softmax_backward2d",
    "layernorm2d",
    "layernorm_backward2d",
    "adam_step",
    "scatter_add_rows",
)


def load_backend(name):
    """Import a backend module by name ('numpy' or 'numba')."""
    if name == "numpy":
        from . import numpy_backend

        return numpy_backend
    if name == "numba":
        from . import numba_backend

        return numba_backend
    raise ValueError(f"unknown kernel backend {name!r} (expected 'numpy' or 'numba')")


def _select():
    requested = os.environ.get("MOELAB_BACKEND", "auto").strip().lower()
    if requested in ("", "auto"):
        try:
            return load_backend("numba")
        except ImportError:
            return load_backend("numpy")
    return load_backend(requested)


_impl = _select()
BACKEND = _impl.NAME

softmax2d = _impl.softmax2d
masked_softmax2d = _impl.masked_softmax2d
softmax_backward2d = _impl.softmax_backward2d
layernorm2d = _impl.layernorm2d
layernorm_backward2d = _impl.layernorm_backward2d
adam_step = _impl.adam_step
scatter_add_rows = _impl.scatter_add_rows
