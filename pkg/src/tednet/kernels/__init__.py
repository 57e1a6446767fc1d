"""Loop-heavy kernels behind the layer primitives.

The Cython extension is used when it has been built; otherwise the numpy
fallback is imported. Set ``TEDNET_BACKEND=python`` to force the fallback.
Both backends return bit-identical arrays.
"""
import os

from . import _pykernels

_NAMES = (
    "im2col", "col2im",
    "maxpool2_forward", "maxpool2_backward",
    "avgpool_forward", "avgpool_backward",
    "upsample_forward", "upsample_backward",
)

try:
    if os.environ.get("TEDNET_BACKEND", "").lower() == "python":
        raise ImportError("compiled backend disabled by TEDNET_BACKEND")
    from . import _ckernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"


def get_backend(name):
    """Return the kernel module for ``name`` ("cython" or "python")."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


im2col = _impl.im2col
col2im = _impl.col2im
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
avgpool_forward = _impl.avgpool_forward
avgpool_backward = _impl.avgpool_backward
upsample_forward = _impl.upsample_forward
upsample_backward = _impl.upsample_backward

__all__ = ["BACKEND", "get_backend", *_NAMES]
