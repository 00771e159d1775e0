"""Hot numeric kernels with two interchangeable backends.

The jit-compiled backend (numba) is used by default; setting SEMDIFF_NUMBA=0
selects the pure-numpy fallback. Matrix products always go through BLAS via
numpy regardless of backend. ``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import os

from . import numpy_impl

_flag = os.environ.get("SEMDIFF_NUMBA", "1").strip().lower()
_want_numba = _flag not in ("0", "false", "off", "no")

if _want_numba:
    try:
        from . import numba_impl as _impl

        BACKEND = "numba"
    except ImportError:
        _impl = numpy_impl
        BACKEND = "numpy"
else:
    _impl = numpy_impl
    BACKEND = "numpy"

group_norm_fwd = _impl.group_norm_fwd
group_norm_bwd = _impl.group_norm_bwd
adam_step = _impl.adam_step
label_edges = _impl.label_edges
binary_dilate = _impl.binary_dilate
binary_erode = _impl.binary_erode
connected_components = _impl.connected_components
bilinear_resize = _impl.bilinear_resize
nearest_resize = _impl.nearest_resize
sepconv_valid = _impl.sepconv_valid

KERNEL_NAMES = [
    "group_norm_fwd",
    "group_norm_bwd",
    "adam_step",
    "label_edges",
    "binary_dilate",
    "binary_erode",
    "connected_components",
    "bilinear_resize",
    "nearest_resize",
    "sepconv_valid",
]


def backend_name() -> str:
    """Active kernel backend, 'numba' or 'numpy'."""
    return BACKEND


def blas_limit():
    """Per-call GEMMs in the hot loops are small; thread handoff costs more
    than it buys, so BLAS runs single-threaded unless SEMDIFF_BLAS_THREADS
    says otherwise."""
    from threadpoolctl import threadpool_limits

    n = int(os.environ.get("SEMDIFF_BLAS_THREADS", "1"))
    return threadpool_limits(limits=n, user_api="blas")
