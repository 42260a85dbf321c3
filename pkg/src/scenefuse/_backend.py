"""Selects the compiled kernel module, falling back to pure numpy.

Set ``SCENEFUSE_PURE_PYTHON=1`` to force the fallback.
"""

import os

from scenefuse import _kernels_py

kernels = _kernels_py
if os.environ.get("SCENEFUSE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from scenefuse import _kernels as kernels  # type: ignore[no-redef]
    except ImportError:
        kernels = _kernels_py

NAME = kernels.NAME


def use(name: str) -> None:
    """Switch kernels at runtime ("cython" or "python"); used by tests and benchmarks."""
    global kernels, NAME
    if name == "python":
        kernels = _kernels_py
    elif name == "cython":
        from scenefuse import _kernels

        kernels = _kernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    NAME = kernels.NAME


def compiled_available() -> bool:
    try:
        from scenefuse import _kernels  # noqa: F401
    except ImportError:
        return False
    return True
