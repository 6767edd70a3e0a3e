"""Kernel backend selection.

The compiled extension is used when it imports, otherwise the numpy twins.
Set ``CLCHAN_KERNELS=python`` (or ``compiled``) to force a choice; forcing
``compiled`` when the extension is missing raises at import.
"""

import importlib
import os

from . import _pykernels

_BACKENDS = {"python": _pykernels}

try:
    _BACKENDS["compiled"] = importlib.import_module("clchan._ckernels")
except ImportError:  # extension not built
    pass


def available():
    """Names of the importable backends."""
    return sorted(_BACKENDS)


def get(name=None):
    """Return a backend module by name, or the active one."""
    if name is None:
        return active
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} not available (have {available()})") from None


def set_backend(name):
    """Switch the active backend; returns the previous name."""
    global active
    prev = active.NAME
    active = get(name)
    return prev


def _select():
    choice = os.environ.get("CLCHAN_KERNELS", "auto").strip().lower()
    if choice in ("", "auto"):
        return _BACKENDS.get("compiled", _pykernels)
    return get(choice)


active = _select()
