"""Kernel backend chosen at import.

The compiled extension is used when it was built; otherwise, or when
``QNNH_PURE_PYTHON=1`` is set, the numpy fallback is used. Both produce
bit-identical results.
"""

import os

from . import _kernels_py

try:
    if os.environ.get("QNNH_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure python requested")
    from . import _kernels as _impl
except ImportError:
    _impl = _kernels_py

BACKEND = _impl.BACKEND
dense = _impl.dense
conv2d = _impl.conv2d
maxpool2d = _impl.maxpool2d
requantize = _kernels_py.requantize
round_half_away = _kernels_py.round_half_away


def available_backends():
    backends = {"python": _kernels_py}
    try:
        from . import _kernels

        backends["cython"] = _kernels
    except ImportError:
        pass
    return backends
