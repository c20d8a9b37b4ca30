"""Hot inner loops, dispatched to numba or numpy.

Set ``CVFK_DISABLE_NUMBA=1`` before import to force the pure-numpy path.
Both implementations stay importable as ``kernels.numpy_impl`` and
``kernels.numba_impl`` (the latter is ``None`` when numba is missing) so
tests and benchmarks can compare them directly.
"""
import os

from . import _numpy as numpy_impl

try:
    from . import _numba as numba_impl
except ImportError:  # pragma: no cover - numba is a hard dep in practice
    numba_impl = None

USE_NUMBA = numba_impl is not None and os.environ.get("CVFK_DISABLE_NUMBA", "0") not in ("1", "true", "yes")

_impl = numba_impl if USE_NUMBA else numpy_impl

bilinear_gather = _impl.bilinear_gather
bilinear_gather_grad = _impl.bilinear_gather_grad
scatter_add = _impl.scatter_add
segment_max = _impl.segment_max
bev_intersection_matrix = _impl.bev_intersection_matrix
nms = _impl.nms
kde = _impl.kde
points_in_boxes = _impl.points_in_boxes

__all__ = [
    "USE_NUMBA", "numpy_impl", "numba_impl",
    "bilinear_gather", "bilinear_gather_grad", "scatter_add", "segment_max",
    "bev_intersection_matrix", "nms", "kde", "points_in_boxes",
]
