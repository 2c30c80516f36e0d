"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy versions in ``_kernels_py`` are used. Set ``M3_PURE_PYTHON=1`` to force
the fallback.
"""
import os

from . import _kernels_py

if os.environ.get("M3_PURE_PYTHON", "") not in ("", "0"):
    kernels = _kernels_py
    NAME = "numpy"
else:
    try:
        from . import _kernels as kernels  # type: ignore[attr-defined]

        NAME = "cython"
    except ImportError:
        kernels = _kernels_py
        NAME = "numpy"

im2col = kernels.im2col
col2im = kernels.col2im
maxpool2_forward = kernels.maxpool2_forward
maxpool2_backward = kernels.maxpool2_backward
