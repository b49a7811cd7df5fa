"""Hot-loop kernels: batched feature propagation and Jacobian blocks.

Two interchangeable backends exist: a Cython extension (_core) and a
vectorized numpy fallback (_fallback).  The compiled backend is selected at
import when available; set RADARSLAM_PURE_PYTHON=1 to force the fallback.
benchmarks/bench_kernels.py compares the two.
"""

import os

import numpy as np

if os.environ.get("RADARSLAM_PURE_PYTHON"):
    from . import _fallback as _impl

    BACKEND = "python"
else:
    try:
        from . import _core as _impl

        BACKEND = "cython"
    except ImportError:
        from . import _fallback as _impl

        BACKEND = "python"


def _contiguous(fn):
    if BACKEND == "python":
        return fn

    def wrapped(*args):
        return fn(
            *(
                np.ascontiguousarray(a, dtype=float) if isinstance(a, np.ndarray) else a
                for a in args
            )
        )

    return wrapped


propagate_features_rk4 = _contiguous(_impl.propagate_features_rk4)
feature_state_blocks = _contiguous(_impl.feature_state_blocks)
retract_bearings = _contiguous(_impl.retract_bearings)
joseph_update = _contiguous(_impl.joseph_update)
logdet9 = _contiguous(_impl.logdet9)
cov_predict = _contiguous(_impl.cov_predict)
nav_rk4 = _contiguous(_impl.nav_rk4)
predict_blocks = _contiguous(_impl.predict_blocks)
psd_ok = _contiguous(_impl.psd_ok)


def ekf_update_core(p, h_sub, cols, residual, r_cov, cond_limit):
    if BACKEND == "cython":
        return _impl.ekf_update_core(
            np.ascontiguousarray(p),
            np.ascontiguousarray(h_sub),
            np.ascontiguousarray(cols, dtype=np.int64),
            np.ascontiguousarray(residual),
            np.ascontiguousarray(r_cov),
            cond_limit,
        )
    return _impl.ekf_update_core(p, h_sub, cols, residual, r_cov, cond_limit)
