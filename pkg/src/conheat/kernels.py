"""Backend selection for the hot loops.

The Cython extension ``conheat._kernels`` is used when it is importable;
otherwise, or when ``CONHEAT_PURE_PYTHON=1``, the numpy fallback is used.
"""

import os

from . import _kernels_py

if os.environ.get("CONHEAT_PURE_PYTHON") == "1":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

local_fit = _impl.local_fit
pair_extrema = _impl.pair_extrema
