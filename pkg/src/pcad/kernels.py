"""Kernel backend selection.

The compiled extension is used when it imports; set ``PCAD_PURE_PYTHON=1`` to
force the numpy fallback.  ``BACKEND`` names the active implementation.
"""

import os

from . import _kernels_py

python_backend = _kernels_py
compiled_backend = None

if os.environ.get("PCAD_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as compiled_backend
    except ImportError:  # extension not built
        _impl = _kernels_py
    else:
        _impl = compiled_backend

BACKEND = "compiled" if _impl is not _kernels_py else "python"

max_pool = _impl.max_pool
bn_train = _impl.bn_train
bn_eval = _impl.bn_eval
bn_backward = _impl.bn_backward
adam_update = _impl.adam_update
