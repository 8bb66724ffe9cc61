"""Numba @njit twins of the kernels in :mod:`deeppark.kernels.ref`.

Selected by default when numba imports (see :mod:`deeppark.kernels`).  Every
function keeps a fixed per-element evaluation order, so results are
reproducible run to run and independent of how callers batch their inputs.
"""

import math

import numpy as np
from numba import njit

PARALLEL_EPS = 1e-12
PARAM_EPS = 1e-9

_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def raycast(ox, oy, dir_x, dir_y, segments, max_range):
    n_rays = dir_x.shape[0]
    n_seg = segments.shape[0]
    out = np.full(n_rays, np.inf)
    for r in range(n_rays):
        dx = dir_x[r]
        dy = dir_y[r]
        best = np.inf
        for s in range(n_seg):
            ax = segments[s, 0]
            ay = segments[s, 1]
            ex = segments[s, 2] - ax
            ey = segments[s, 3] - ay
            denom = ex * dy - dx * ey
            if abs(denom) <= PARALLEL_EPS:
                continue
            rx = ax - ox
            ry = ay - oy
            t = (ex * ry - rx * ey) / denom
            if t <= PARAM_EPS or t > max_range:
                continue
            u = (dx * ry - dy * rx) / denom
            if u < -PARALLEL_EPS or u > 1.0 + PARALLEL_EPS:
                continue
            if t < best:
                best = t
        out[r] = best
    return out


@njit(**_JIT)
def points_in_polygon(px, py, polygon):
    n_pts = px.shape[0]
    nv = polygon.shape[0]
    inside = np.zeros(n_pts, dtype=np.bool_)
    for i in range(nv):
        x1 = polygon[i, 0]
        y1 = polygon[i, 1]
        j = i + 1
        if j == nv:
            j = 0
        x2 = polygon[j, 0]
        y2 = polygon[j, 1]
        for p in range(n_pts):
            if (y1 > py[p]) != (y2 > py[p]):
                x_at = x1 + (py[p] - y1) * (x2 - x1) / (y2 - y1)
                if px[p] < x_at:
                    inside[p] = not inside[p]
    return inside


@njit(**_JIT)
def _point_segment_dist_sq(px, py, x1, y1, x2, y2):
    ex = x2 - x1
    ey = y2 - y1
    ll = ex * ex + ey * ey
    if ll <= 0.0:
        dx = px - x1
        dy = py - y1
        return dx * dx + dy * dy
    s = ((px - x1) * ex + (py - y1) * ey) / ll
    if s < 0.0:
        s = 0.0
    elif s > 1.0:
        s = 1.0
    dx = px - (x1 + s * ex)
    dy = py - (y1 + s * ey)
    return dx * dx + dy * dy


@njit(**_JIT)
def point_in_polygon_closed(px, py, polygon, tol):
    nv = polygon.shape[0]
    tol_sq = tol * tol
    for i in range(nv):
        j = i + 1
        if j == nv:
            j = 0
        if _point_segment_dist_sq(
            px, py, polygon[i, 0], polygon[i, 1], polygon[j, 0], polygon[j, 1]
        ) <= tol_sq:
            return True
    inside = False
    for i in range(nv):
        x1 = polygon[i, 0]
        y1 = polygon[i, 1]
        j = i + 1
        if j == nv:
            j = 0
        x2 = polygon[j, 0]
        y2 = polygon[j, 1]
        if (y1 > py) != (y2 > py):
            x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            if px < x_at:
                inside = not inside
    return inside


@njit(**_JIT)
def _proper_crossing(p1x, p1y, p2x, p2y, q1x, q1y, q2x, q2y):
    dx1 = p2x - p1x
    dy1 = p2y - p1y
    dx2 = q2x - q1x
    dy2 = q2y - q1y
    denom = dx1 * dy2 - dy1 * dx2
    if abs(denom) <= PARALLEL_EPS:
        return False
    rx = q1x - p1x
    ry = q1y - p1y
    s = (rx * dy2 - ry * dx2) / denom
    u = (rx * dy1 - ry * dx1) / denom
    return PARAM_EPS < s < 1.0 - PARAM_EPS and PARAM_EPS < u < 1.0 - PARAM_EPS


@njit(**_JIT)
def rect_inside_polygon(corners, polygon, tol):
    for k in range(4):
        if not point_in_polygon_closed(corners[k, 0], corners[k, 1], polygon, tol):
            return False
    nv = polygon.shape[0]
    for k in range(4):
        k2 = k + 1
        if k2 == 4:
            k2 = 0
        for i in range(nv):
            j = i + 1
            if j == nv:
                j = 0
            if _proper_crossing(
                corners[k, 0], corners[k, 1], corners[k2, 0], corners[k2, 1],
                polygon[i, 0], polygon[i, 1], polygon[j, 0], polygon[j, 1],
            ):
                return False
    return True


@njit(**_JIT)
def rects_overlap(ca, cb, tol):
    for which in range(2):
        corners = ca if which == 0 else cb
        for k in range(2):
            ex = corners[k + 1, 0] - corners[k, 0]
            ey = corners[k + 1, 1] - corners[k, 1]
            ll = np.hypot(ex, ey)
            if ll <= 0.0:
                continue
            nx = -ey / ll
            ny = ex / ll
            amin = np.inf
            amax = -np.inf
            bmin = np.inf
            bmax = -np.inf
            for m in range(4):
                pa = ca[m, 0] * nx + ca[m, 1] * ny
                pb = cb[m, 0] * nx + cb[m, 1] * ny
                if pa < amin:
                    amin = pa
                if pa > amax:
                    amax = pa
                if pb < bmin:
                    bmin = pb
                if pb > bmax:
                    bmax = pb
            depth = min(amax, bmax) - max(amin, bmin)
            if depth <= tol:
                return False
    return True


@njit(**_JIT)
def conv3x3_forward(xp, weights, bias):
    b, hp, wp, c = xp.shape
    h = hp - 2
    w = wp - 2
    f = weights.shape[3]
    out = np.empty((b, h, w, f))
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                o = out[bi, i, j]
                for fi in range(f):
                    o[fi] = bias[fi]
                for di in range(3):
                    for dj in range(3):
                        wv = weights[di, dj]
                        xr = xp[bi, i + di, j + dj]
                        for ci in range(c):
                            xv = xr[ci]
                            wr = wv[ci]
                            for fi in range(f):
                                o[fi] += xv * wr[fi]
    return out


@njit(**_JIT)
def conv3x3_backward(xp, weights, grad_out, need_gx=True):
    b, hp, wp, c = xp.shape
    h = hp - 2
    w = wp - 2
    f = weights.shape[3]
    grad_xp = np.zeros((b, hp, wp, c)) if need_gx else np.zeros((0, 0, 0, 0))
    grad_w = np.zeros_like(weights)
    grad_b = np.zeros(f)
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                gy = grad_out[bi, i, j]
                for fi in range(f):
                    grad_b[fi] += gy[fi]
                for di in range(3):
                    for dj in range(3):
                        wv = weights[di, dj]
                        gw = grad_w[di, dj]
                        xr = xp[bi, i + di, j + dj]
                        for ci in range(c):
                            xv = xr[ci]
                            gwr = gw[ci]
                            for fi in range(f):
                                gwr[fi] += xv * gy[fi]
                        if need_gx:
                            gxr = grad_xp[bi, i + di, j + dj]
                            for ci in range(c):
                                wr = wv[ci]
                                acc = 0.0
                                for fi in range(f):
                                    acc += gy[fi] * wr[fi]
                                gxr[ci] += acc
    return grad_xp, grad_w, grad_b


@njit(**_JIT)
def maxpool2_forward(x):
    b, h, w, c = x.shape
    h2 = h // 2
    w2 = w // 2
    out = np.empty((b, h2, w2, c))
    idx = np.empty((b, h2, w2, c), dtype=np.uint8)
    for bi in range(b):
        for i in range(h2):
            r0 = x[bi, 2 * i]
            r1 = x[bi, 2 * i + 1]
            for j in range(w2):
                c00 = r0[2 * j]
                c01 = r0[2 * j + 1]
                c10 = r1[2 * j]
                c11 = r1[2 * j + 1]
                for ci in range(c):
                    best = c00[ci]
                    k = 0
                    if c01[ci] > best:
                        best = c01[ci]
                        k = 1
                    if c10[ci] > best:
                        best = c10[ci]
                        k = 2
                    if c11[ci] > best:
                        best = c11[ci]
                        k = 3
                    out[bi, i, j, ci] = best
                    idx[bi, i, j, ci] = k
    return out, idx


@njit(**_JIT)
def maxpool2_backward(grad_out, idx, h, w):
    b, h2, w2, c = grad_out.shape
    gx = np.zeros((b, h, w, c))
    for bi in range(b):
        for i in range(h2):
            for j in range(w2):
                for ci in range(c):
                    k = idx[bi, i, j, ci]
                    gx[bi, 2 * i + k // 2, 2 * j + k % 2, ci] = grad_out[bi, i, j, ci]
    return gx


@njit(**_JIT)
def conv_relu_pool_forward(xp, weights, bias):
    # Fused conv3x3 -> ReLU -> 2x2 max pool; the full-resolution conv
    # output never touches memory.  Exact zeros in the input are skipped
    # (perception grids are mostly free cells), and all hot accesses use
    # flat manual indexing.
    b, hp, wp, c = xp.shape
    h2 = (hp - 2) // 2
    w2 = (wp - 2) // 2
    f = weights.shape[3]
    wf = np.ascontiguousarray(weights).ravel()
    xpf = np.ascontiguousarray(xp).ravel()
    pooled = np.empty((b, h2, w2, f))
    idx = np.empty((b, h2, w2, f), dtype=np.uint8)
    window = np.empty((4, f))
    row_stride = wp * c
    for bi in range(b):
        sample = bi * hp * row_stride
        for i2 in range(h2):
            for j2 in range(w2):
                for k in range(4):
                    i = 2 * i2 + (k >> 1)
                    j = 2 * j2 + (k & 1)
                    o = window[k]
                    if f == 1:
                        # single feature map: a branchless dot product over
                        # the contiguous window beats the zero-skip
                        acc = bias[0]
                        for di in range(3):
                            x_off = sample + (i + di) * row_stride + j * c
                            w_off = di * 3 * c
                            for djc in range(3 * c):
                                acc += xpf[x_off + djc] * wf[w_off + djc]
                        o[0] = acc
                        continue
                    for fi in range(f):
                        o[fi] = bias[fi]
                    for di in range(3):
                        x_off = sample + (i + di) * row_stride + j * c
                        w_off = di * 3 * c * f
                        for djc in range(3 * c):
                            xv = xpf[x_off + djc]
                            if xv != 0.0:
                                w_base = w_off + djc * f
                                for fi in range(f):
                                    o[fi] += xv * wf[w_base + fi]
                out = pooled[bi, i2, j2]
                kout = idx[bi, i2, j2]
                for fi in range(f):
                    best = window[0, fi]
                    if best < 0.0:
                        best = 0.0
                    k_best = 0
                    for k in range(1, 4):
                        v = window[k, fi]
                        if v > best:
                            best = v
                            k_best = k
                    out[fi] = best
                    kout[fi] = k_best
    return pooled, idx


@njit(**_JIT)
def conv_relu_pool_backward(xp, weights, grad_pooled, pooled, idx,
                            need_gx=True):
    # Routed gradients are densified into a (4, F) per-cell buffer so the
    # weight update vectorizes over the feature axis.
    b, h2, w2, f = grad_pooled.shape
    hp = xp.shape[1]
    wp = xp.shape[2]
    c = xp.shape[3]
    grad_xp = np.zeros_like(xp) if need_gx else np.zeros((0, 0, 0, 0))
    gxf = grad_xp.ravel()
    grad_w = np.zeros_like(weights)
    gwf = grad_w.ravel()
    wf = np.ascontiguousarray(weights).ravel()
    xpf = np.ascontiguousarray(xp).ravel()
    grad_b = np.zeros(f)
    buf = np.zeros((4, f))
    active = np.zeros(4, dtype=np.bool_)
    row_stride = wp * c
    for bi in range(b):
        sample = bi * hp * row_stride
        for i2 in range(h2):
            for j2 in range(w2):
                got = False
                for fi in range(f):
                    g = grad_pooled[bi, i2, j2, fi]
                    if g == 0.0 or pooled[bi, i2, j2, fi] <= 0.0:
                        continue
                    k = idx[bi, i2, j2, fi]
                    buf[k, fi] = g
                    grad_b[fi] += g
                    active[k] = True
                    got = True
                if not got:
                    continue
                for k in range(4):
                    if not active[k]:
                        continue
                    active[k] = False
                    gk = buf[k]
                    i = 2 * i2 + (k >> 1)
                    j = 2 * j2 + (k & 1)
                    if f == 1:
                        # single feature map: contiguous AXPY updates
                        g0 = gk[0]
                        for di in range(3):
                            x_off = sample + (i + di) * row_stride + j * c
                            w_off = di * 3 * c
                            for djc in range(3 * c):
                                gwf[w_off + djc] += g0 * xpf[x_off + djc]
                            if need_gx:
                                for djc in range(3 * c):
                                    gxf[x_off + djc] += g0 * wf[w_off + djc]
                        gk[0] = 0.0
                        continue
                    for di in range(3):
                        x_off = sample + (i + di) * row_stride + j * c
                        w_off = di * 3 * c * f
                        for djc in range(3 * c):
                            xv = xpf[x_off + djc]
                            w_base = w_off + djc * f
                            if xv != 0.0:
                                for fi in range(f):
                                    gwf[w_base + fi] += xv * gk[fi]
                            if need_gx:
                                acc = 0.0
                                for fi in range(f):
                                    acc += gk[fi] * wf[w_base + fi]
                                gxf[x_off + djc] += acc
                    for fi in range(f):
                        gk[fi] = 0.0
    return grad_xp, grad_w, grad_b


@njit(**_JIT)
def render_grid_cells(veh_x, veh_y, cos_h, sin_h, fx, fy, boundary,
                      hit_fx, hit_fy, tgt_fx, tgt_fy,
                      rows, cols, cell_size, anchor_row, anchor_col):
    n = fx.shape[0]
    cells = np.empty((rows, cols), dtype=np.int8)
    flat = cells.ravel()
    nv = boundary.shape[0]
    for p in range(n):
        wx = veh_x + cos_h * fx[p] - sin_h * fy[p]
        wy = veh_y + sin_h * fx[p] + cos_h * fy[p]
        inside = False
        for i in range(nv):
            x1 = boundary[i, 0]
            y1 = boundary[i, 1]
            j = i + 1
            if j == nv:
                j = 0
            x2 = boundary[j, 0]
            y2 = boundary[j, 1]
            if (y1 > wy) != (y2 > wy):
                x_at = x1 + (wy - y1) * (x2 - x1) / (y2 - y1)
                if wx < x_at:
                    inside = not inside
        flat[p] = 0 if inside else -1
    for hp in range(hit_fx.shape[0]):
        rr = np.int64(np.floor(hit_fy[hp] / cell_size + 0.5)) + anchor_row
        cc = np.int64(np.floor(hit_fx[hp] / cell_size + 0.5)) + anchor_col
        if 0 <= rr < rows and 0 <= cc < cols:
            cells[rr, cc] = -1
    ti = np.int64(np.floor(tgt_fy / cell_size + 0.5)) + anchor_row
    tj = np.int64(np.floor(tgt_fx / cell_size + 0.5)) + anchor_col
    if 0 <= ti < rows and 0 <= tj < cols and cells[ti, tj] == 0:
        cells[ti, tj] = 1
    return cells


@njit(**_JIT)
def rk4_step(x, y, v, heading, steer, accel, rate, dt, wheelbase, substeps):
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


@njit(**_JIT)
def discounted_scan(deltas, episode_end, decay):
    n = deltas.shape[0]
    out = np.empty_like(deltas)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        if episode_end[t]:
            acc = 0.0
        acc = deltas[t] + decay * acc
        out[t] = acc
    return out
