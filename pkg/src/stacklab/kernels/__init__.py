"""Hot-kernel dispatch.

The environment variable ``STACKLAB_BACKEND`` selects the implementation:

* ``numba`` -- jitted kernels (error if numba is unavailable)
* ``numpy`` -- pure-numpy fallback
* ``auto``  -- numba when importable, numpy otherwise (default)

Selection happens once at import.  ``active_backend()`` reports the choice;
both backend modules stay importable directly for benchmarks and tests.
"""

import os

from . import numpy_backend

_CHOICE = os.environ.get("STACKLAB_BACKEND", "auto").lower()

if _CHOICE not in ("auto", "numba", "numpy"):
    raise ValueError(f"STACKLAB_BACKEND must be auto, numba or numpy, got {_CHOICE!r}")

if _CHOICE == "numpy":
    _impl = numpy_backend
    _BACKEND = "numpy"
else:
    try:
        from . import numba_backend as _impl

        _BACKEND = "numba"
    except ImportError:
        if _CHOICE == "numba":
            raise
        _impl = numpy_backend
        _BACKEND = "numpy"


def active_backend() -> str:
    return _BACKEND


rmsnorm_fwd = _impl.rmsnorm_fwd
rmsnorm_bwd = _impl.rmsnorm_bwd
swiglu_fwd = _impl.swiglu_fwd
swiglu_bwd = _impl.swiglu_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
cross_entropy_fwd = _impl.cross_entropy_fwd
cross_entropy_bwd = _impl.cross_entropy_bwd
rope_rotate = _impl.rope_rotate
adamw_update = _impl.adamw_update
sq_sum = _impl.sq_sum
merge_pair = _impl.merge_pair
encode_merges = _impl.encode_merges
