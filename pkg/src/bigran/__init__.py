"""Bi-granular retrieval: PQ candidate search plus dense post-verification."""

import os as _os

# must run before numpy/numba spin up their thread pools
_threads = _os.environ.get("BIGRAN_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
