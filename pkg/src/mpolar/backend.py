"""Kernel backend selection: compiled extension vs pure-numpy fallback.

The compiled extension is picked at import when present; ``MPOLAR_BACKEND``
(``compiled``/``python``/``auto``) or :func:`set_backend` override it.  Both
backends satisfy the same contracts; the compiled one exists to meet the
real-time derivation budget.
"""

from __future__ import annotations

import os

from .errors import ParameterError

try:
    from . import _kernels  # noqa: F401

    HAVE_COMPILED = True
except ImportError:
    _kernels = None
    HAVE_COMPILED = False

_VALID = ("auto", "compiled", "python")
_forced: str | None = None


def _env_choice() -> str:
    choice = os.environ.get("MPOLAR_BACKEND", "auto").lower()
    return choice if choice in _VALID else "auto"


def set_backend(name: str) -> None:
    """Force a backend ('compiled', 'python') or restore 'auto' selection."""
    global _forced
    if name not in _VALID:
        raise ParameterError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "compiled" and not HAVE_COMPILED:
        raise ParameterError("compiled backend requested but the extension is not built")
    _forced = None if name == "auto" else name


def active_backend() -> str:
    choice = _forced or _env_choice()
    if choice == "compiled" and not HAVE_COMPILED:
        raise ParameterError("MPOLAR_BACKEND=compiled but the extension is not built")
    if choice == "auto":
        return "compiled" if HAVE_COMPILED else "python"
    return choice


def use_compiled() -> bool:
    return active_backend() == "compiled"


def default_threads() -> int:
    return os.cpu_count() or 1


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        return default_threads()
    if threads < 1:
        raise ParameterError(f"thread count must be >= 1, got {threads}")
    return int(threads)
