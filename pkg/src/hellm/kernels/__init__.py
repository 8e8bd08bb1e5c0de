"""Selectable numerical kernel backends.

Two interchangeable implementations of the hot inner loops (embedding
scatter-add and the linear-chain CRF recursions): vectorized numpy and
numba @njit. The backend is chosen at import from the HELLM_KERNELS
environment variable ("numpy", "numba", or "auto" = numba when
importable), and can be switched at runtime with use(). All kernels are
pure functions of ndarrays, so the two backends are drop-in equal up to
floating-point round-off; benchmarks/bench_kernels.py compares their
speed.
"""

import os

from ..errors import ConfigError
from . import numpy_impl

ENV_VAR = "HELLM_KERNELS"

_BACKENDS = {"numpy": numpy_impl}
try:
    from . import numba_impl

    _BACKENDS["numba"] = numba_impl
except ImportError:
    numba_impl = None

_active = None


def available() -> list[str]:
    return sorted(_BACKENDS)


def active_name() -> str:
    return _active.NAME


def use(name: str):
    """Switch the active backend; returns the backend module."""
    global _active
    if name not in _BACKENDS:
        raise ConfigError(
            f"unknown kernel backend {name!r}; available: {', '.join(available())}"
        )
    _active = _BACKENDS[name]
    return _active


def _initial_backend() -> str:
    requested = os.environ.get(ENV_VAR, "auto").strip().lower()
    if requested in ("auto", ""):
        return "numba" if "numba" in _BACKENDS else "numpy"
    if requested in _BACKENDS:
        return requested
    raise ConfigError(
        f"{ENV_VAR}={requested!r} is not a known backend; "
        f"available: {', '.join(available())} or auto"
    )


use(_initial_backend())


def scatter_add_rows(out, ids, rows):
    return _active.scatter_add_rows(out, ids, rows)


def crf_forward(emissions, transitions):
    return _active.crf_forward(emissions, transitions)


def crf_backward(emissions, transitions):
    return _active.crf_backward(emissions, transitions)


def crf_marginals(emissions, transitions):
    return _active.crf_marginals(emissions, transitions)


def viterbi_decode(emissions, transitions):
    return _active.viterbi_decode(emissions, transitions)
