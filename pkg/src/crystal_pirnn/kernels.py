"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback is used.  Setting the environment variable
``CRYSTAL_PIRNN_PURE_PYTHON=1`` forces the fallback (useful for debugging
and for the backend benchmark).
"""
from __future__ import annotations

import logging
import os

from . import _kernels_py

log = logging.getLogger(__name__)

PURE_ENV = "CRYSTAL_PIRNN_PURE_PYTHON"


def _load():
    if os.environ.get(PURE_ENV, "").strip() not in ("", "0"):
        return _kernels_py, "python"
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError as exc:  # extension not built
        log.info("compiled kernels unavailable (%s); using numpy fallback", exc)
        return _kernels_py, "python"
    return _kernels, "cython"


_impl, BACKEND = _load()

moment_rhs = _impl.moment_rhs
rollout_forward = _impl.rollout_forward
rollout_backward = _impl.rollout_backward
BN_EPS = _kernels_py.BN_EPS

__all__ = ["BACKEND", "BN_EPS", "moment_rhs", "rollout_forward", "rollout_backward"]
