"""Backend selection for the hot kernels.

The compiled extension is preferred; set ``CDCL_PURE_PYTHON=1`` to force
the numpy fallback.
"""
import importlib
import os

from . import _pykernels


def load_backend(name: str):
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "python":
        return _pykernels
    if name == "cython":
        return importlib.import_module("cdcl._ckernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def _select():
    if os.environ.get("CDCL_PURE_PYTHON", "").strip() not in ("", "0"):
        return "python", _pykernels
    try:
        return "cython", load_backend("cython")
    except ImportError:
        return "python", _pykernels


BACKEND, _impl = _select()

contrastive_rows = _impl.contrastive_rows
spherical_kmeans = _impl.spherical_kmeans

__all__ = ["BACKEND", "contrastive_rows", "spherical_kmeans", "load_backend"]
