"""Finite-element limit analysis toolkit (build in progress)."""

import os as _os
import sys as _sys

if "numpy" not in _sys.modules:
    _threads = _os.environ.get("FELA_NUM_THREADS", "1")
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)
del _os, _sys

__version__ = "0.1.0"
