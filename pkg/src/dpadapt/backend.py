"""Kernel backend selection: compiled extension with pure-Python fallback.

The compiled module dpadapt._core is preferred when it imported cleanly;
otherwise the NumPy implementations in _kernels_py are used. The choice
can be forced with the environment variable DPADAPT_BACKEND=ext|python
(import-time) or programmatically with set_backend() (tests, benchmarks).
"""

import os

from . import _kernels_py
from .errors import ConfigError

KERNEL_NAMES = (
    "affine",
    "matmul_nt",
    "matmul_tn",
    "per_example_outer",
    "row_sq_norms",
    "gmm_log_components",
    "logsumexp_rows",
)

_BACKENDS = {"python": _kernels_py}

try:
    from . import _core

    _BACKENDS["ext"] = _core
except ImportError:  # extension not built; pure fallback still works
    _core = None


class _Kernels:
    """Mutable namespace the numeric modules call through (`K.affine(...)`)."""


K = _Kernels()
_active = None


def available_backends():
    return tuple(sorted(_BACKENDS))


def active_backend():
    return _active


def set_backend(name):
    """Switch the kernel implementation; name is 'ext' or 'python'."""
    global _active
    if name not in _BACKENDS:
        raise ConfigError(
            f"backend {name!r} not available; have {sorted(_BACKENDS)}"
        )
    mod = _BACKENDS[name]
    for fn in KERNEL_NAMES:
        setattr(K, fn, getattr(mod, fn))
    _active = name
    return name


def _initial_choice():
    forced = os.environ.get("DPADAPT_BACKEND", "auto").strip().lower()
    if forced in ("", "auto"):
        return "ext" if "ext" in _BACKENDS else "python"
    if forced not in _BACKENDS:
        raise ConfigError(
            f"DPADAPT_BACKEND={forced!r} but that backend is not available"
        )
    return forced


set_backend(_initial_choice())
