"""Backend selection for the mean-field / enumeration kernels.

The compiled extension is used when importable; set ``CRFGAN_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

from . import _kernels_py

if os.environ.get("CRFGAN_PURE_PYTHON"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

meanfield_forward = _impl.meanfield_forward
meanfield_backward = _impl.meanfield_backward
enumerate_energies = _impl.enumerate_energies
