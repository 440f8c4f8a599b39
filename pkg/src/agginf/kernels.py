"""Kernel selection.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy implementations in ``_pykernels`` are used.  Setting the environment
variable ``AGGINF_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("AGGINF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

OK = _pykernels.OK
INFEASIBLE = _pykernels.INFEASIBLE
UNDERFLOW = _pykernels.UNDERFLOW

message = _impl.message
scaling = _impl.scaling
chain_sweep = _impl.chain_sweep
sample_paths = _impl.sample_paths


def backend(name: str):
    """Return the kernel module for ``"python"`` or ``"cython"``."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
