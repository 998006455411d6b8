"""CRF-guided, memory-efficient GAN for 3D volume synthesis.

Modules: ``volume`` (data + I/O), ``subvolume`` (slab selection),
``netspec`` (network graphs), ``crf`` (dense binary CRF), ``losses``,
``trainer``, ``inference``, ``metrics``, ``bench`` and ``cli``.
"""
from .kernels import BACKEND as KERNEL_BACKEND
from .volume import PhantomSpec, Volume3D, load_volume, make_phantom, normalize_intensity, save_volume

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND",
    "PhantomSpec",
    "Volume3D",
    "load_volume",
    "make_phantom",
    "normalize_intensity",
    "save_volume",
]
