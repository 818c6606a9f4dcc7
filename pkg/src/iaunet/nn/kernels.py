"""Kernel backend selection.

The compiled extension is used when importable; set ``IAUNET_PURE_PYTHON=1``
to force the numpy kernels. Both backends produce bit-identical results.
"""

import os

from . import _pykernels

try:
    if os.environ.get("IAUNET_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python kernels requested")
    from . import _ckernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "numpy"


def get_backend(name=None):
    """Return the kernel module for ``name`` ("cython" / "numpy"), default active."""
    if name is None:
        return _impl
    if name == "numpy":
        return _pykernels
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


im2col = _impl.im2col
col2im = _impl.col2im
maxpool2x2_forward = _impl.maxpool2x2_forward
maxpool2x2_backward = _impl.maxpool2x2_backward
upsample2x_forward = _impl.upsample2x_forward
upsample2x_backward = _impl.upsample2x_backward
rmsprop_update = _impl.rmsprop_update
