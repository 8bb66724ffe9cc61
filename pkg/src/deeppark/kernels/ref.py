"""Pure-numpy implementations of the hot kernels.

This is the fallback backend (``DEEPPARK_BACKEND=numpy``) and the shape
contract for the numba twins in :mod:`deeppark.kernels.jit`.  Both backends
compute the same math; they may differ in the last floating-point ulp where
BLAS reassociates sums.
"""

import math

import numpy as np

PARALLEL_EPS = 1e-12   # |cross product| below this counts as parallel
PARAM_EPS = 1e-9       # segment-parameter tolerance for "proper" crossings


def raycast(ox, oy, dir_x, dir_y, segments, max_range):
    """Distance along each ray to the nearest segment hit.

    segments is an (E, 4) array of [ax, ay, bx, by] rows; ray directions are
    unit vectors.  Returns an (R,) array, np.inf where nothing is hit within
    max_range.
    """
    if segments.shape[0] == 0:
        return np.full(dir_x.shape[0], np.inf)
    ax, ay = segments[:, 0], segments[:, 1]
    ex = segments[:, 2] - ax
    ey = segments[:, 3] - ay
    rx = ax - ox
    ry = ay - oy
    # Solve o + t*d = a + u*e for each (ray, segment) pair.
    denom = ex[None, :] * dir_y[:, None] - dir_x[:, None] * ey[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ex[None, :] * ry[None, :] - rx[None, :] * ey[None, :]) / denom
        u = (dir_x[:, None] * ry[None, :] - dir_y[:, None] * rx[None, :]) / denom
    ok = (
        (np.abs(denom) > PARALLEL_EPS)
        & (t > PARAM_EPS)
        & (t <= max_range)
        & (u >= -PARALLEL_EPS)
        & (u <= 1.0 + PARALLEL_EPS)
    )
    t = np.where(ok, t, np.inf)
    return t.min(axis=1)


def points_in_polygon(px, py, polygon):
    """Even-odd containment test for a batch of points.

    polygon is a (V, 2) vertex array (closed implicitly).  Points exactly on
    an edge follow the half-open crossing rule; use point_in_polygon_closed
    where on-edge points must count as inside.
    """
    inside = np.zeros(px.shape[0], dtype=np.bool_)
    nv = polygon.shape[0]
    for i in range(nv):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % nv]
        crosses = (y1 > py) != (y2 > py)
        if not crosses.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < x_at)
    return inside


def _point_segment_dist_sq(px, py, x1, y1, x2, y2):
    ex = x2 - x1
    ey = y2 - y1
    ll = ex * ex + ey * ey
    if ll <= 0.0:
        dx, dy = px - x1, py - y1
        return dx * dx + dy * dy
    s = ((px - x1) * ex + (py - y1) * ey) / ll
    s = min(1.0, max(0.0, s))
    dx = px - (x1 + s * ex)
    dy = py - (y1 + s * ey)
    return dx * dx + dy * dy


def point_in_polygon_closed(px, py, polygon, tol):
    """Containment with points within tol of an edge counting as inside."""
    nv = polygon.shape[0]
    tol_sq = tol * tol
    for i in range(nv):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % nv]
        if _point_segment_dist_sq(px, py, x1, y1, x2, y2) <= tol_sq:
            return True
    return bool(
        points_in_polygon(np.array([px]), np.array([py]), polygon)[0]
    )


def _proper_crossing(p1, p2, q1, q2):
    # Strict interior intersection of two segments; touching endpoints and
    # collinear overlap do not count.
    dx1, dy1 = p2[0] - p1[0], p2[1] - p1[1]
    dx2, dy2 = q2[0] - q1[0], q2[1] - q1[1]
    denom = dx1 * dy2 - dy1 * dx2
    if abs(denom) <= PARALLEL_EPS:
        return False
    rx, ry = q1[0] - p1[0], q1[1] - p1[1]
    s = (rx * dy2 - ry * dx2) / denom
    u = (rx * dy1 - ry * dx1) / denom
    return PARAM_EPS < s < 1.0 - PARAM_EPS and PARAM_EPS < u < 1.0 - PARAM_EPS


def rect_inside_polygon(corners, polygon, tol):
    """True iff the quad lies fully inside the polygon (closed containment).

    Edge-sharing tangency counts as inside; the test is corner containment
    plus absence of proper edge crossings, which is exact for simple
    polygons.
    """
    for k in range(4):
        if not point_in_polygon_closed(corners[k, 0], corners[k, 1], polygon, tol):
            return False
    nv = polygon.shape[0]
    for k in range(4):
        p1 = corners[k]
        p2 = corners[(k + 1) % 4]
        for i in range(nv):
            if _proper_crossing(p1, p2, polygon[i], polygon[(i + 1) % nv]):
                return False
    return True


def rects_overlap(ca, cb, tol):
    """Separating-axis test for two convex quads given as (4, 2) corners.

    Penetration depth <= tol on any axis counts as separated, so tangent
    contact is not an overlap.
    """
    for corners in (ca, cb):
        for k in range(2):
            ex = corners[(k + 1) % 4, 0] - corners[k, 0]
            ey = corners[(k + 1) % 4, 1] - corners[k, 1]
            ll = np.hypot(ex, ey)
            if ll <= 0.0:
                continue
            nx, ny = -ey / ll, ex / ll
            pa = ca[:, 0] * nx + ca[:, 1] * ny
            pb = cb[:, 0] * nx + cb[:, 1] * ny
            depth = min(pa.max(), pb.max()) - max(pa.min(), pb.min())
            if depth <= tol:
                return False
    return True


def conv3x3_forward(xp, weights, bias):
    """3x3 convolution, stride 1, channels-last, on pre-padded input.

    xp: (B, H+2, W+2, C) zero-padded input; weights: (3, 3, C, F);
    bias: (F,).  Returns (B, H, W, F).
    """
    b, hp, wp, c = xp.shape
    h, w = hp - 2, wp - 2
    f = weights.shape[3]
    out = np.broadcast_to(bias, (b, h, w, f)).copy()
    for di in range(3):
        for dj in range(3):
            out += xp[:, di:di + h, dj:dj + w, :] @ weights[di, dj]
    return out


def conv3x3_backward(xp, weights, grad_out, need_gx=True):
    """Gradients of conv3x3_forward.

    Returns (grad_xp, grad_w, grad_b); grad_xp is padded like xp, or an
    empty array when need_gx is false (first layer of a network).
    """
    b, hp, wp, c = xp.shape
    h, w = hp - 2, wp - 2
    grad_w = np.zeros_like(weights)
    grad_xp = np.zeros_like(xp) if need_gx else np.zeros((0, 0, 0, 0))
    for di in range(3):
        for dj in range(3):
            block = xp[:, di:di + h, dj:dj + w, :]
            grad_w[di, dj] = np.tensordot(block, grad_out,
                                          axes=([0, 1, 2], [0, 1, 2]))
            if need_gx:
                grad_xp[:, di:di + h, dj:dj + w, :] += grad_out @ weights[di, dj].T
    grad_b = grad_out.sum(axis=(0, 1, 2))
    return grad_xp, grad_w, grad_b


def maxpool2_forward(x):
    """2x2 max pooling, stride 2, channels-last.  Returns (pooled, argmax).

    argmax holds the in-window position (0..3, row-major) of the first
    maximal cell, which is where the gradient routes on ties.
    """
    b, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    best = x[:, 0::2, 0::2, :].copy()
    idx = np.zeros((b, h2, w2, c), dtype=np.uint8)
    for k, (di, dj) in enumerate([(0, 1), (1, 0), (1, 1)], start=1):
        cand = x[:, di::2, dj::2, :]
        better = cand > best
        best = np.where(better, cand, best)
        idx = np.where(better, np.uint8(k), idx)
    return best, idx


def maxpool2_backward(grad_out, idx, h, w):
    """Scatter pooled gradients back to the argmax cells."""
    b, h2, w2, c = grad_out.shape
    gx = np.zeros((b, h, w, c))
    for k, (di, dj) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
        gx[:, di::2, dj::2, :] = np.where(idx == k, grad_out, 0.0)
    return gx


def conv_relu_pool_forward(xp, weights, bias):
    """conv3x3 -> ReLU -> 2x2 max pool as one unit.

    The fallback composes the primitives; the numba twin fuses them so the
    full-resolution conv output never hits memory.  Returns (pooled, idx)
    with pooled (B, H/2, W/2, F).
    """
    conv = conv3x3_forward(xp, weights, bias)
    return maxpool2_forward(np.maximum(conv, 0.0))


def conv_relu_pool_backward(xp, weights, grad_pooled, pooled, idx,
                            need_gx=True):
    """Gradients of conv_relu_pool_forward.

    Only winning pool cells with a positive (ReLU-active) value carry
    gradient; pooled == 0 means the winner was clamped, so nothing flows.
    """
    b, h2, w2, f = grad_pooled.shape
    h, w = 2 * h2, 2 * w2
    g_relu = maxpool2_backward(np.where(pooled > 0.0, grad_pooled, 0.0),
                               idx, h, w)
    return conv3x3_backward(xp, weights, g_relu, need_gx)


def render_grid_cells(veh_x, veh_y, cos_h, sin_h, fx, fy, boundary,
                      hit_fx, hit_fy, tgt_fx, tgt_fy,
                      rows, cols, cell_size, anchor_row, anchor_col):
    """Rasterize the vehicle-frame occupancy grid.

    fx, fy are the flat cell-center offsets in the vehicle frame; hit_fx,
    hit_fy are vehicle-frame sensor hit points; (tgt_fx, tgt_fy) the
    vehicle-frame target position.  Cells outside the boundary polygon or
    holding a hit point become -1; the target cell becomes +1 if still free.
    """
    wx = veh_x + cos_h * fx - sin_h * fy
    wy = veh_y + sin_h * fx + cos_h * fy
    inside = points_in_polygon(wx, wy, boundary)
    cells = np.where(inside, np.int8(0), np.int8(-1)).reshape(rows, cols)

    rr = np.floor(hit_fy / cell_size + 0.5).astype(np.int64) + anchor_row
    cc = np.floor(hit_fx / cell_size + 0.5).astype(np.int64) + anchor_col
    ok = (rr >= 0) & (rr < rows) & (cc >= 0) & (cc < cols)
    cells[rr[ok], cc[ok]] = -1

    ti = int(np.floor(tgt_fy / cell_size + 0.5)) + anchor_row
    tj = int(np.floor(tgt_fx / cell_size + 0.5)) + anchor_col
    if 0 <= ti < rows and 0 <= tj < cols and cells[ti, tj] == 0:
        cells[ti, tj] = 1
    return cells


def rk4_step(x, y, v, heading, steer, accel, rate, dt, wheelbase, substeps):
    """Classical RK4 on the single-track ODE; returns the raw 5-vector.

    Speed and steering have constant derivatives, so their stage values are
    written in closed form; the position and heading stages are the full
    fourth-order scheme.
    """
    h = dt / substeps
    for _ in range(substeps):
        k1x = v * math.cos(heading)
        k1y = v * math.sin(heading)
        k1h = v / wheelbase * math.tan(steer)
        v2 = v + 0.5 * h * accel
        h2 = heading + 0.5 * h * k1h
        s2 = steer + 0.5 * h * rate
        k2x = v2 * math.cos(h2)
        k2y = v2 * math.sin(h2)
        k2h = v2 / wheelbase * math.tan(s2)
        h3 = heading + 0.5 * h * k2h
        k3x = v2 * math.cos(h3)
        k3y = v2 * math.sin(h3)
        k3h = v2 / wheelbase * math.tan(s2)
        v4 = v + h * accel
        h4 = heading + h * k3h
        s4 = steer + h * rate
        k4x = v4 * math.cos(h4)
        k4y = v4 * math.sin(h4)
        k4h = v4 / wheelbase * math.tan(s4)
        x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        y += h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
        heading += h / 6.0 * (k1h + 2.0 * k2h + 2.0 * k3h + k4h)
        v += h * accel
        steer += h * rate
    return x, y, v, heading, steer


def discounted_scan(deltas, episode_end, decay):
    """Backward recursion adv[t] = delta[t] + decay * adv[t+1] within episodes.

    episode_end[t] = 1 marks the last step of an episode; the recursion does
    not propagate across that boundary.
    """
    n = deltas.shape[0]
    out = np.empty_like(deltas)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        if episode_end[t]:
            acc = 0.0
        acc = deltas[t] + decay * acc
        out[t] = acc
    return out
