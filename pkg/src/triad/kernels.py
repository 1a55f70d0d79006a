"""Hot-loop backend selection.

The compiled extension is used when it was built; otherwise the pure-Python
twin is used. Set ``TRIAD_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import _kernels_py

_compiled: ModuleType | None
try:
    from . import _kernels as _compiled  # type: ignore[attr-defined]
except ImportError:  # extension not built
    _compiled = None


def get_backend(name: str | None = None) -> ModuleType:
    """Return the kernel module for ``name`` ("compiled" or "python")."""
    if name is None:
        name = "python" if os.environ.get("TRIAD_PURE_PYTHON") else "compiled"
    if name == "compiled":
        return _compiled if _compiled is not None else _kernels_py
    if name == "python":
        return _kernels_py
    raise ValueError(f"unknown kernel backend {name!r}")


def compiled_available() -> bool:
    return _compiled is not None


_active = get_backend()
BACKEND = "compiled" if _active is _compiled and _compiled is not None else "python"

sweep_refresh = _active.sweep_refresh
count_ops_window = _active.count_ops_window
# scalar path stays in Python so results are backend-independent
mul_fixed = _kernels_py.mul_fixed
