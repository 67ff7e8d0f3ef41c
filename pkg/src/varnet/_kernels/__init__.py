"""Hot numerical kernels with a compiled core and a numpy fallback.

The Cython extension ``_core`` is used when it was built; otherwise (or
when ``VARNET_PURE_PYTHON`` is set to a non-empty value) the numpy versions
in ``_fallback`` are used.  ``BACKEND`` names the active implementation.
"""

import os

from . import _fallback

if os.environ.get("VARNET_PURE_PYTHON"):
    _impl = _fallback
else:
    try:
        from . import _core as _impl
    except ImportError:  # extension not built
        _impl = _fallback

BACKEND = "python" if _impl is _fallback else "cython"

forward = _impl.forward
vjp = _impl.vjp
box_qp = _impl.box_qp


def available_backends():
    """Map backend name to module for every importable implementation."""
    out = {"python": _fallback}
    try:
        from . import _core
    except ImportError:
        pass
    else:
        out["cython"] = _core
    return out
