"""Selects the compiled core or the pure-Python fallback at import time.

Set ``DSMCBF_PURE_PYTHON=1`` to force the fallback even when the extension
is built.
"""
import os

try:  # pragma: no cover - depends on whether the extension was built
    from . import _core
except ImportError:  # pragma: no cover
    _core = None

BACKEND = "python" if (_core is None or os.environ.get("DSMCBF_PURE_PYTHON") == "1") else "compiled"


def available_backends() -> list[str]:
    return ["python"] if _core is None else ["compiled", "python"]


def resolve(backend: str | None) -> str:
    backend = backend or BACKEND
    if backend not in ("compiled", "python"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "compiled" and _core is None:
        return "python"
    return backend
