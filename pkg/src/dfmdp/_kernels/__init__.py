"""Hot numerical kernels with two interchangeable backends.

The compiled Cython extension (``dfmdp._kernels._fast``) and the pure numpy
reference (``dfmdp._kernels.reference``) implement the same functions with
identical semantics. Selection happens once at import:

* ``DFMDP_BACKEND=python`` forces the numpy reference,
* ``DFMDP_BACKEND=compiled`` requires the extension (ImportError if absent),
* unset or ``auto``: compiled when available, numpy otherwise.
"""
import os

from . import reference

_requested = os.environ.get("DFMDP_BACKEND", "auto").lower()

if _requested == "python":
    _impl = reference
elif _requested in ("auto", "compiled"):
    try:
        from . import _fast as _impl  # type: ignore[no-redef]
    except ImportError:
        if _requested == "compiled":
            raise
        _impl = reference
else:
    raise ValueError(f"unknown DFMDP_BACKEND value {_requested!r}")

backend_name = "compiled" if _impl is not reference else "python"

soft_vi_loop = _impl.soft_vi_loop
mlp_q = _impl.mlp_q
ddqn_step = _impl.ddqn_step
