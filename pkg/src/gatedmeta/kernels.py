"""Kernel dispatch: the compiled extension when importable, NumPy otherwise.

``GATEDMETA_KERNELS=numpy`` forces the fallback at import time;
:func:`use_backend` switches at runtime (benchmarks and equivalence tests).
"""
import os

from . import _npkernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_NAMES = ("group_shrink", "conv3x3_forward", "conv3x3_backward", "maxpool2_forward", "maxpool2_backward")

BACKEND = None


def available_backends():
    return ("numpy", "cython") if _ckernels is not None else ("numpy",)


def use_backend(name: str) -> str:
    """Select ``"cython"`` or ``"numpy"``; returns the previous backend."""
    global BACKEND
    if name == "cython" and _ckernels is None:
        raise RuntimeError("compiled kernels are not built; reinstall with Cython available")
    if name not in ("cython", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    module = _ckernels if name == "cython" else _npkernels
    previous = BACKEND
    g = globals()
    for n in _NAMES:
        g[n] = getattr(module, n)
    BACKEND = name
    return previous


def _default():
    forced = os.environ.get("GATEDMETA_KERNELS", "").strip().lower()
    if forced == "numpy" or _ckernels is None:
        return "numpy"
    return "cython"


use_backend(_default())
