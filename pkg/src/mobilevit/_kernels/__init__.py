"""Convolution kernel backends.

The compiled extension is used when it imports; otherwise the numpy
implementations are used. Set ``MOBILEVIT_KERNELS=python`` to force the
numpy path.
"""

import os
from types import ModuleType

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    BACKENDS["compiled"] = _ckernels

_active: ModuleType


def available() -> list:
    return sorted(BACKENDS)


def use(name: str) -> None:
    """Select the active backend by name ("compiled" or "python")."""
    global _active
    if name not in BACKENDS:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}; available: {available()}")
    _active = BACKENDS[name]


def active() -> str:
    return "compiled" if _active is _ckernels else "python"


def get() -> ModuleType:
    return _active


_requested = os.environ.get("MOBILEVIT_KERNELS", "")
if _requested:
    use(_requested)
else:
    _active = _ckernels if _ckernels is not None else _pykernels
