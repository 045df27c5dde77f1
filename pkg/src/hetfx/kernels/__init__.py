"""Hot loops for tree growing and forest prediction.

Two interchangeable backends: numba-compiled loops (default) and a pure-numpy
fallback. Set ``HETFX_DISABLE_NUMBA=1`` to force the fallback; it is also used
automatically when numba cannot be imported. Both backends produce
bit-identical trees and predictions for the same inputs.
"""

import os

from . import _numpy

_disabled = os.environ.get("HETFX_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

if _disabled:
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        from . import _jit as _impl

        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _impl = _numpy
        BACKEND = "numpy"

grow_tree = _impl.grow_tree
route = _impl.route
prune_tree = _impl.prune_tree
compact_tree = _impl.compact_tree
predict_regression = _impl.predict_regression
predict_causal = _impl.predict_causal


def backend_module(name):
    """Return the kernel module for ``name`` ("numba" or "numpy")."""
    if name == "numpy":
        return _numpy
    if name == "numba":
        from . import _jit

        return _jit
    raise ValueError(f"unknown kernel backend {name!r}")
