"""Kernel backend selection.

The compiled extension is used when it imports; set ``FWDSMOOTH_PURE=1`` to
force the numpy fallback.
"""

import os

from . import _kernels_py

try:
    if os.environ.get("FWDSMOOTH_PURE", "") not in ("", "0"):
        raise ImportError("pure backend requested")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _kernels_py


def gauss_backward_apply(log_w, mean_prev, x_cur, sigma, features_t, backend=None):
    impl = _impl
    if backend == "python":
        impl = _kernels_py
    elif backend == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        impl = _compiled
    return impl.gauss_backward_apply(log_w, mean_prev, x_cur, sigma, features_t)
