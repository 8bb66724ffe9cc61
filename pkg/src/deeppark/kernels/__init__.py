"""Hot-kernel backend selection.

The numba backend is the default; set ``DEEPPARK_BACKEND=numpy`` to run the
pure-numpy fallback (useful where numba is unavailable or for A/B timing,
see benchmarks/bench_kernels.py).  Selection happens once at import time.
"""

import os

from . import ref

_requested = os.environ.get("DEEPPARK_BACKEND", "").strip().lower()

if _requested in ("", "numba"):
    try:
        from . import jit as _impl
        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        _impl = ref
        BACKEND = "numpy"
elif _requested == "numpy":
    _impl = ref
    BACKEND = "numpy"
else:
    raise RuntimeError(
        f"DEEPPARK_BACKEND={_requested!r} not recognized (use 'numba' or 'numpy')"
    )

raycast = _impl.raycast
points_in_polygon = _impl.points_in_polygon
point_in_polygon_closed = _impl.point_in_polygon_closed
rect_inside_polygon = _impl.rect_inside_polygon
rects_overlap = _impl.rects_overlap
conv3x3_forward = _impl.conv3x3_forward
conv3x3_backward = _impl.conv3x3_backward
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
conv_relu_pool_forward = _impl.conv_relu_pool_forward
conv_relu_pool_backward = _impl.conv_relu_pool_backward
render_grid_cells = _impl.render_grid_cells
rk4_step = _impl.rk4_step
discounted_scan = _impl.discounted_scan

__all__ = [
    "BACKEND",
    "raycast",
    "points_in_polygon",
    "point_in_polygon_closed",
    "rect_inside_polygon",
    "rects_overlap",
    "conv3x3_forward",
    "conv3x3_backward",
    "maxpool2_forward",
    "maxpool2_backward",
    "conv_relu_pool_forward",
    "conv_relu_pool_backward",
    "render_grid_cells",
    "rk4_step",
    "discounted_scan",
]
