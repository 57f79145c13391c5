"""Backend selection for the hot kernels.

Two interchangeable implementations exist: a numba-jitted one (default)
and a pure-numpy fallback. Selection order:

1. an explicit :func:`set_backend` call,
2. the ``HEDNET_BACKEND`` environment variable (``numba`` or ``numpy``),
3. ``numba`` if importable, else ``numpy``.

Both backends produce bitwise-identical results; see
``benchmarks/backend_bench.py`` for a speed comparison.
"""

import os

from . import _numpy

_active_name = None
_active_module = None


def _resolve_default() -> str:
    env = os.environ.get("HEDNET_BACKEND", "").strip().lower()
    if env in ("numba", "numpy"):
        return env
    if env:
        raise ValueError(f"unknown HEDNET_BACKEND value: {env!r}")
    try:
        from . import _numba  # noqa: F401
        return "numba"
    except ImportError:
        return "numpy"


def set_backend(name: str) -> None:
    """Force a kernel backend; mainly for tests and benchmarks."""
    global _active_name, _active_module
    if name == "numpy":
        _active_name, _active_module = "numpy", _numpy
    elif name == "numba":
        from . import _numba
        _active_name, _active_module = "numba", _numba
    else:
        raise ValueError(f"unknown backend: {name!r}")


def active_backend() -> str:
    if _active_name is None:
        set_backend(_resolve_default())
    return _active_name


def get():
    """Return the module implementing the active backend."""
    if _active_module is None:
        set_backend(_resolve_default())
    return _active_module
