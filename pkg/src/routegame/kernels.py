"""Selects the best-response kernel at import: compiled extension if built,
pure numpy otherwise. Set ROUTEGAME_PURE_PYTHON=1 to force the fallback
(used by the kernel benchmark and parity tests).
"""

import os

from . import _br_py

if os.environ.get("ROUTEGAME_PURE_PYTHON"):
    _impl = _br_py
else:
    try:
        from . import _br_cy as _impl
    except ImportError:
        _impl = _br_py

BACKEND = _impl.BACKEND
best_response_rounds = _impl.best_response_rounds
water_fill = _br_py.water_fill
