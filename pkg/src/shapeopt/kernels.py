"""Kernel selection: the compiled extension when importable, numpy otherwise.

Set ``SHAPEOPT_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("SHAPEOPT_PURE_PYTHON", "0") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _kernels_py

assemble_p1 = _impl.assemble_p1
patch_fit = _impl.patch_fit
contour_segments = _impl.contour_segments
p1_element_data = _kernels_py.p1_element_data

__all__ = ["BACKEND", "assemble_p1", "patch_fit", "contour_segments", "p1_element_data"]
