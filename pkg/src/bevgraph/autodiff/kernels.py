"""Kernel backend selection.

Two interchangeable backends implement the same flat function API over
C-contiguous float64 matrices: `_ckernels` (compiled) and `_pykernels`
(numpy). The active backend's functions are re-exported as attributes of
this module, so call sites written as ``kernels.matmul(...)`` pay no
dispatch overhead beyond one attribute lookup.

Selection order: the ``BEVGRAPH_KERNELS`` environment variable (``auto``,
``c`` or ``python``), defaulting to ``auto`` which prefers the compiled
backend when the extension was built.
"""

import os

from . import _pykernels

_BACKENDS = {"python": _pykernels}
try:
    from . import _ckernels
    _BACKENDS["c"] = _ckernels
except ImportError:
    _ckernels = None

_KERNEL_NAMES = tuple(
    name for name in dir(_pykernels)
    if not name.startswith("_") and callable(getattr(_pykernels, name))
)

_active = None


def available_backends():
    """Names of the backends importable in this environment."""
    return sorted(_BACKENDS)


def get_backend():
    """Name of the currently active backend ('c' or 'python')."""
    return _active


def set_backend(name):
    """Activate a backend by name; 'auto' prefers the compiled one.

    Returns the name actually activated. Raises ValueError for unknown
    names and RuntimeError when the compiled backend is requested but was
    not built.
    """
    global _active
    if name == "auto":
        name = "c" if "c" in _BACKENDS else "python"
    if name == "py":
        name = "python"
    if name not in ("c", "python"):
        raise ValueError(
            f"unknown kernel backend {name!r}; expected 'auto', 'c' or 'python'"
        )
    if name not in _BACKENDS:
        raise RuntimeError(
            "compiled kernel backend requested but the extension is not "
            "built; reinstall the package or set BEVGRAPH_KERNELS=python"
        )
    module = _BACKENDS[name]
    g = globals()
    for fn in _KERNEL_NAMES:
        g[fn] = getattr(module, fn)
    _active = name
    return name


set_backend(os.environ.get("BEVGRAPH_KERNELS", "auto"))
