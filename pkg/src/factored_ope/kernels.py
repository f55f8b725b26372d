"""Kernel dispatch: compiled extension when available, numpy twin otherwise.

Set ``FACTORED_OPE_FORCE_PY=1`` to force the numpy implementations (used by
the twin-equality tests and the kernel benchmark).
"""
from __future__ import annotations

import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # pragma: no cover - depends on build environment
    _ckernels = None

_force_py = os.environ.get("FACTORED_OPE_FORCE_PY", "") == "1"
_impl = _pykernels if (_ckernels is None or _force_py) else _ckernels

BACKEND = "python" if _impl is _pykernels else "cython"
HAVE_COMPILED = _ckernels is not None

step_batch = _impl.step_batch
hamming_into = _impl.hamming_into


def implementations():
    """Return the available (name, module) kernel implementations."""
    impls = [("python", _pykernels)]
    if _ckernels is not None:
        impls.append(("cython", _ckernels))
    return impls
