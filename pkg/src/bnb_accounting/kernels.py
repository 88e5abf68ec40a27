"""Selects the compiled kernel backend when available, else the numpy fallback.

Set BNB_ACCOUNTING_BACKEND=python to force the fallback.
"""

import importlib
import os

_MODULES = {"cython": "bnb_accounting._kernels", "python": "bnb_accounting._kernels_py"}


def load_backend(name: str):
    """Imports and returns the kernel module for backend `name`."""
    return importlib.import_module(_MODULES[name])


def _select():
    forced = os.environ.get("BNB_ACCOUNTING_BACKEND", "").strip().lower()
    if forced:
        if forced not in _MODULES:
            raise ImportError(f"unknown BNB_ACCOUNTING_BACKEND={forced!r}")
        return forced, load_backend(forced)
    try:
        return "cython", load_backend("cython")
    except ImportError:
        return "python", load_backend("python")


BACKEND, _impl = _select()

log_sum_exp_rows = _impl.log_sum_exp_rows
quantile_rows = _impl.quantile_rows
quantile_log_sum_rows = _impl.quantile_log_sum_rows


def available_backends() -> list[str]:
    names = []
    for name in _MODULES:
        try:
            load_backend(name)
        except ImportError:
            continue
        names.append(name)
    return names
