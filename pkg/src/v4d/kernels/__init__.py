"""Convolution kernel backends.

Two interchangeable implementations of the same contract: a compiled Cython
extension (preferred) and a pure-numpy fallback. Selection happens at import
time and can be forced with ``V4D_BACKEND=ext|numpy``. ``V4D_THREADS`` caps
the compiled backend's internal parallelism (default: all cores); results
are bit-identical for any thread count because every output cell is reduced
by a single thread in a fixed order.

All functions work on channels-first float64 arrays:

* input  ``(N, Cin, Tp, Dp, Hp, Wp)`` -- already padded, "valid" conv only
* weights ``(kT, kD, kH, kW, Cin, Cout)``
* output ``(N, Cout, To, Do, Ho, Wo)``

A 4D convolution is computed as the accumulation of 3D convolutions over
time-shifted views of the padded input, one per temporal kernel tap; both
backends share that structure.
"""

from __future__ import annotations

import os

import numpy as np

from . import fallback

try:
    from . import compiled

    HAVE_EXT = True
except ImportError:  # extension not built
    compiled = None
    HAVE_EXT = False

_BACKENDS = {"numpy": fallback}
if HAVE_EXT:
    _BACKENDS["ext"] = compiled


def _initial_backend():
    env = os.environ.get("V4D_BACKEND", "auto").strip().lower()
    if env in ("", "auto"):
        return "ext" if HAVE_EXT else "numpy"
    if env not in _BACKENDS:
        raise ImportError(
            f"V4D_BACKEND={env!r} unavailable (have: {sorted(_BACKENDS)})"
        )
    return env


_active_name = _initial_backend()


def backend_name() -> str:
    return _active_name


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def set_backend(name: str) -> None:
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r} (have: {sorted(_BACKENDS)})")
    global _active_name
    _active_name = name


def get_num_threads() -> int:
    env = os.environ.get("V4D_THREADS", "").strip()
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def out_extent(extent: int, kernel: int, stride: int) -> int:
    """Valid-convolution output extent."""
    return (extent - kernel) // stride + 1


def conv_fwd(xp: np.ndarray, w: np.ndarray, stride) -> np.ndarray:
    return _BACKENDS[_active_name].conv_fwd(xp, w, stride, get_num_threads())


def conv_igrad(dy: np.ndarray, w: np.ndarray, x_shape, pads, stride) -> np.ndarray:
    """Input gradient, cropped to the unpadded input shape.

    ``x_shape`` is the padded input shape the forward pass saw; ``pads`` are
    the four (before, after) pad pairs that produced it.
    """
    return _BACKENDS[_active_name].conv_igrad(
        dy, w, x_shape, pads, stride, get_num_threads()
    )


def conv_wgrad(xp: np.ndarray, dy: np.ndarray, w_shape, stride) -> np.ndarray:
    return _BACKENDS[_active_name].conv_wgrad(xp, dy, w_shape, stride, get_num_threads())
