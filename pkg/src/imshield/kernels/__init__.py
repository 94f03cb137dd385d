"""Hot numeric kernels with selectable implementation.

The convolution kernels dominate training and inference time. Two
interchangeable implementations exist: numba-jitted loops and a
pure-numpy fallback. Selection order:

1. ``IMSHIELD_KERNELS=numpy`` or ``IMSHIELD_KERNELS=numba`` forces one.
2. Otherwise numba is used when importable, numpy if not.

``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import os

from . import _numpy

_IMPLS = {"numpy": _numpy}
try:
    from . import _numba

    _IMPLS["numba"] = _numba
except ImportError:  # numba missing or broken: numpy keeps everything working
    _numba = None

_choice = os.environ.get("IMSHIELD_KERNELS", "").strip().lower()
if _choice:
    if _choice not in _IMPLS:
        available = ", ".join(sorted(_IMPLS))
        raise ImportError(
            f"IMSHIELD_KERNELS={_choice!r} is not available (choices: {available})"
        )
    _active = _IMPLS[_choice]
else:
    _active = _IMPLS.get("numba", _numpy)

conv2d_forward = _active.conv2d_forward
conv2d_backward_input = _active.conv2d_backward_input
conv2d_backward_weights = _active.conv2d_backward_weights


def active_backend() -> str:
    """Name of the kernel implementation in use."""
    return _active.BACKEND_NAME


def available_backends() -> list[str]:
    return sorted(_IMPLS)


def get_impl(name: str):
    """Fetch a specific implementation module (for tests and benchmarks)."""
    if name not in _IMPLS:
        raise KeyError(f"unknown kernel backend {name!r}; have {sorted(_IMPLS)}")
    return _IMPLS[name]
