"""Pick the compiled core when available, else the numpy fallback.

Set ``DPPSELECT_PURE_PYTHON=1`` to force the fallback (used by the backend
equivalence tests and the benchmark).
"""

import os

from . import _fallback

fallback = _fallback

if os.environ.get("DPPSELECT_PURE_PYTHON", "") not in ("", "0"):
    compiled = None
else:
    try:
        from . import _core as compiled
    except ImportError:  # extension not built
        compiled = None

impl = compiled if compiled is not None else _fallback
NAME = "cython" if compiled is not None else "python"

greedy_map = impl.greedy_map
subset_dets = impl.subset_dets
subset_dets_adj = impl.subset_dets_adj
