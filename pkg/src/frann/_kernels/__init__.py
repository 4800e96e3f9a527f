"""Scan-kernel backend selection.

The compiled Cython extension is preferred; the numpy fallback is used
when the extension is missing or when FRANN_KERNEL=python is set. Both
backends are bit-exact equivalents (see tests/test_kernels.py).
"""

from __future__ import annotations

import os

from . import _pyscan

BLOCK = _pyscan.BLOCK

_forced = os.environ.get("FRANN_KERNEL", "auto").lower()

if _forced in ("python", "fallback"):
    _impl = _pyscan
    _backend = "python"
else:
    try:
        from . import _scan as _impl  # type: ignore[no-redef]

        _backend = "cython"
    except ImportError:
        if _forced == "cython":
            raise
        _impl = _pyscan
        _backend = "python"

scan_codes_f32 = _impl.scan_codes_f32
scan_codes_q8 = _impl.scan_codes_q8


def backend_name() -> str:
    return _backend
