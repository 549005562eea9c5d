"""Kernel dispatch: compiled extension when available, numpy otherwise.

Set ``DDPMLMC_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("DDPMLMC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def stiffness_triplets(points, tris, coef):
    return _impl.stiffness_triplets(_f64(points), _i64(tris), _f64(coef))


def sg_triplets(points, tris, psi, coef):
    return _impl.sg_triplets(_f64(points), _i64(tris), _f64(psi), _f64(coef))


def bernoulli(x):
    return _impl.bernoulli(x)


def locate(xs, ys, points, tris, query):
    return _impl.locate(_f64(xs), _f64(ys), _f64(points), _i64(tris), _f64(query))


def disc_members(centroids, centers, radius):
    centers = _f64(np.reshape(centers, (-1, 2)))
    return _impl.disc_members(_f64(centroids), centers, float(radius))


def implementations():
    """Both backends keyed by name (the compiled one only if importable)."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels as compiled
    except ImportError:
        return out
    out["cython"] = compiled
    return out
