"""Kernel backend selection.

The compiled extension (`nslogic._native`, Cython) is preferred; the pure
Python twin is used when the extension is unavailable or when the
environment variable ``NSLOGIC_PURE`` is set to a non-empty value.  Both
backends are semantically identical and produce bitwise-equal floats.
"""

import os

from . import _pykernels

impl = _pykernels
if not os.environ.get("NSLOGIC_PURE"):
    try:
        from . import _native

        if getattr(_native, "BACKEND", None) == "native":
            impl = _native
    except ImportError:
        pass

BACKEND = impl.BACKEND
