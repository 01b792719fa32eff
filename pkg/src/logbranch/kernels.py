"""Backend selection for the event loops.

The compiled extension is used when it imports; otherwise, or when
``LOGBRANCH_BACKEND=python`` is set, the pure-Python twin is used.  Both
produce identical output for identical generator states.
"""

from __future__ import annotations

import os

from . import _fallback

_impl = _fallback
if os.environ.get("LOGBRANCH_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _fallback

BACKEND = _impl.BACKEND
HORIZON, ABSORBED, STOPPED, OVERFLOW = (
    _fallback.HORIZON,
    _fallback.ABSORBED,
    _fallback.STOPPED,
    _fallback.OVERFLOW,
)
ACCEPTED, PARENT_PLUS, COMPETITION = _fallback.ACCEPTED, _fallback.PARENT_PLUS, _fallback.COMPETITION

ctmc_run = _impl.ctmc_run
sde_run = _impl.sde_run
dual_run = _impl.dual_run
graphical_run = _impl.graphical_run
asg_backward = _impl.asg_backward
branching_classes = _impl.branching_classes


def backend(name: str):
    """Return the kernel module named ``"cython"`` or ``"python"``."""
    if name == "python":
        return _fallback
    if name == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown backend {name!r}")
