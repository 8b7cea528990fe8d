"""Select the compiled kernels when available, the numpy fallback otherwise.

Set ``DRIFT_TUNE_PURE_PYTHON=1`` to force the fallback.
"""

import os

from drift_tune import _fallback

try:
    if os.environ.get("DRIFT_TUNE_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-Python backend requested")
    from drift_tune import _kernels as _impl

    NAME = "compiled"
except ImportError:
    _impl = _fallback
    NAME = "python"

jacobi_rotate = _impl.jacobi_rotate
rbf_kernel_sum = _impl.rbf_kernel_sum


def compiled_available():
    try:
        from drift_tune import _kernels  # noqa: F401
    except ImportError:
        return False
    return True
