"""Kernel backend selection.

The compiled extension is preferred when importable; otherwise the numpy
fallback is used. ``INFOMAX3D_KERNELS=numpy|cython`` forces a choice
(``cython`` raises if the extension is missing).
"""

import os

_choice = os.environ.get("INFOMAX3D_KERNELS", "auto").lower()

if _choice not in ("auto", "cython", "numpy"):
    raise RuntimeError(f"INFOMAX3D_KERNELS must be auto, cython or numpy, got {_choice!r}")

if _choice == "numpy":
    from . import _kernels_np as _impl

    _BACKEND = "numpy"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        _BACKEND = "cython"
    except ImportError:
        if _choice == "cython":
            raise
        from . import _kernels_np as _impl

        _BACKEND = "numpy"


def kernel_backend() -> str:
    """Name of the active kernel implementation ('cython' or 'numpy')."""
    return _BACKEND


conv3d_forward = _impl.conv3d_forward
conv3d_backward = _impl.conv3d_backward
maxpool3d_forward = _impl.maxpool3d_forward
maxpool3d_backward = _impl.maxpool3d_backward
