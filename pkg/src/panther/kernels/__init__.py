"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import from the PANTHER_BACKEND environment
variable: "numba", "numpy", or "auto" (default — numba when importable).
Both implementations are importable directly for the comparison benchmark
(`panther bench-kernels`).
"""

import os

from . import numpy_impl

_requested = os.environ.get("PANTHER_BACKEND", "auto").lower()

if _requested not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"PANTHER_BACKEND must be 'auto', 'numba' or 'numpy', got {_requested!r}"
    )

if _requested == "numpy":
    _impl = numpy_impl
    BACKEND = "numpy"
else:
    try:
        from . import numba_impl as _impl

        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        _impl = numpy_impl
        BACKEND = "numpy"

conv1d_depthwise_fwd = _impl.conv1d_depthwise_fwd
conv1d_depthwise_bwd = _impl.conv1d_depthwise_bwd
scatter_add_rows = _impl.scatter_add_rows
softmax_rows = _impl.softmax_rows
adam_update = _impl.adam_update


def backends():
    """Names of the importable backends, fast path first."""
    names = []
    try:
        from . import numba_impl  # noqa: F401

        names.append("numba")
    except ImportError:
        pass
    names.append("numpy")
    return names
