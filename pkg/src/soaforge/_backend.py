"""Pick the kernel implementation at import time.

The compiled ``_native`` extension is preferred; ``SOAFORGE_PURE=1`` or a
missing build selects the NumPy fallback.  Both expose the same functions.
"""

from __future__ import annotations

import os

from soaforge import _purepy

purepy = _purepy
native = None

if os.environ.get("SOAFORGE_PURE", "") not in ("", "0"):
    impl = _purepy
else:
    try:
        from soaforge import _native as native
    except ImportError:
        impl = _purepy
    else:
        impl = native

NAME = impl.NAME


def available():
    """Backends importable in this environment, compiled first."""
    return [m for m in (native, _purepy) if m is not None]
