"""Kernel backend selection.

The compiled extension is used when it imports; setting the environment
variable ``PEDGHMM_BACKEND=python`` forces the NumPy fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("PEDGHMM_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

nearest_two = _impl.nearest_two
propagate = _impl.propagate
filter_step = _impl.filter_step
forward_loglik = _impl.forward_loglik
forward_backward = _impl.forward_backward

__all__ = ["BACKEND", "nearest_two", "propagate", "filter_step", "forward_loglik", "forward_backward"]
