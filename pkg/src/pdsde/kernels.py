"""Backend selection for the variation recursions.

The compiled extension is used when it imports; set ``PDSDE_PURE_PYTHON=1``
to force the numpy fallback. Both backends produce the same values up to
floating-point summation order.
"""

import os
from types import SimpleNamespace

import numpy as np

from . import _fallback

_NAMES = ("propagate_first", "propagate_second")


def _load_compiled():
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels


_compiled = None if os.environ.get("PDSDE_PURE_PYTHON", "").lower() in ("1", "true", "yes") else _load_compiled()


def _wrap(ext):
    def propagate_first(A, idx, src):
        return ext.propagate_first(
            np.ascontiguousarray(A, dtype=np.float64),
            np.ascontiguousarray(idx, dtype=np.int64),
            np.ascontiguousarray(src, dtype=np.float64),
        )

    def propagate_second(A, idx, B, C, J):
        return ext.propagate_second(
            np.ascontiguousarray(A, dtype=np.float64),
            np.ascontiguousarray(idx, dtype=np.int64),
            np.ascontiguousarray(B, dtype=np.float64),
            np.ascontiguousarray(C, dtype=np.float64),
            np.ascontiguousarray(J, dtype=np.float64),
        )

    return SimpleNamespace(name="cython", propagate_first=propagate_first, propagate_second=propagate_second)


PYTHON = SimpleNamespace(name="python", **{k: getattr(_fallback, k) for k in _NAMES})
COMPILED = None if _compiled is None else _wrap(_compiled)
ACTIVE = COMPILED or PYTHON
BACKEND = ACTIVE.name


def backend(name: str | None = None) -> SimpleNamespace:
    """Kernel namespace by name (``"python"`` or ``"cython"``); default is the active one."""
    if name is None:
        return ACTIVE
    if name == "python":
        return PYTHON
    if name == "cython":
        if COMPILED is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return COMPILED
    raise ValueError(f"unknown backend {name!r}")


def propagate_first(A, idx, src):
    return ACTIVE.propagate_first(A, idx, src)


def propagate_second(A, idx, B, C, J):
    return ACTIVE.propagate_second(A, idx, B, C, J)
