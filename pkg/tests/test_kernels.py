"""Backend agreement: the numba kernels must match the numpy fallback."""

import math

import numpy as np
import pytest

import deeppark.kernels as selected
from deeppark.kernels import jit as kj
from deeppark.kernels import ref as kr


def test_backend_selection_default():
    assert selected.BACKEND in ("numba", "numpy")
    assert selected.raycast is (kj if selected.BACKEND == "numba" else kr).raycast


def test_raycast_agreement():
    rng = np.random.default_rng(0)
    for _ in range(20):
        segments = rng.uniform(-20, 20, size=(12, 4))
        angles = rng.uniform(-math.pi, math.pi, size=50)
        args = (0.5, -0.2, np.cos(angles), np.sin(angles), segments, 25.0)
        a = kr.raycast(*args)
        b = kj.raycast(*args)
        assert np.array_equal(a, b)


def test_raycast_no_segments():
    out = kj.raycast(0.0, 0.0, np.ones(4), np.zeros(4),
                     np.zeros((0, 4)), 10.0)
    assert np.all(np.isinf(out))


def test_points_in_polygon_agreement():
    rng = np.random.default_rng(1)
    poly = np.array([[0.0, 0.0], [4.0, 0.0], [4.0, 3.0], [2.0, 5.0],
                     [0.0, 3.0]])
    px = rng.uniform(-1, 5, 400)
    py = rng.uniform(-1, 6, 400)
    assert np.array_equal(kr.points_in_polygon(px, py, poly),
                          kj.points_in_polygon(px, py, poly))


def test_point_in_polygon_closed_edge_tolerance():
    poly = np.array([[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]])
    for impl in (kr, kj):
        assert impl.point_in_polygon_closed(2.0, 0.0, poly, 1e-9)
        assert impl.point_in_polygon_closed(2.0, -0.5e-9, poly, 1e-9)
        assert not impl.point_in_polygon_closed(2.0, -1e-6, poly, 1e-9)
        assert impl.point_in_polygon_closed(2.0, 2.0, poly, 1e-9)


def test_rect_inside_polygon_agreement():
    rng = np.random.default_rng(2)
    poly = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 6.0], [6.0, 6.0],
                     [6.0, 10.0], [0.0, 10.0]])
    for _ in range(200):
        cx, cy = rng.uniform(-2, 12, 2)
        ang = rng.uniform(0, math.pi)
        c, s = math.cos(ang), math.sin(ang)
        half = rng.uniform(0.2, 2.0, 2)
        local = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]]) * half
        corners = local @ np.array([[c, -s], [s, c]]).T + (cx, cy)
        assert (kr.rect_inside_polygon(corners, poly, 1e-9)
                == kj.rect_inside_polygon(corners, poly, 1e-9))


def test_rects_overlap_agreement_and_tangency():
    rng = np.random.default_rng(3)
    for _ in range(200):
        def rect():
            cx, cy = rng.uniform(-3, 3, 2)
            ang = rng.uniform(0, math.pi)
            c, s = math.cos(ang), math.sin(ang)
            half = rng.uniform(0.3, 1.5, 2)
            local = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]]) * half
            return local @ np.array([[c, -s], [s, c]]).T + (cx, cy)
        a, b = rect(), rect()
        assert kr.rects_overlap(a, b, 1e-9) == kj.rects_overlap(a, b, 1e-9)
    # exact tangency is not an overlap
    a = np.array([[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [0.0, 1.0]])
    b = a + np.array([2.0, 0.0])
    for impl in (kr, kj):
        assert not impl.rects_overlap(a, b, 1e-9)
        assert impl.rects_overlap(a, b + np.array([-1e-6, 0.0]), 1e-9)


@pytest.mark.parametrize("shape", [(2, 1, 30, 32), (2, 30, 1, 16),
                                   (3, 4, 5, 8)])
def test_conv3x3_agreement(shape):
    b, ci, co, hw = shape
    rng = np.random.default_rng(4)
    xp = rng.normal(size=(b, hw + 2, hw + 2, ci))
    w = rng.normal(size=(3, 3, ci, co))
    bias = rng.normal(size=co)
    ya = kr.conv3x3_forward(xp, w, bias)
    yb = kj.conv3x3_forward(xp, w, bias)
    assert np.allclose(ya, yb, atol=1e-12)
    gy = rng.normal(size=ya.shape)
    for need in (True, False):
        ra = kr.conv3x3_backward(xp, w, gy, need)
        rb = kj.conv3x3_backward(xp, w, gy, need)
        start = 0 if need else 1
        for xa, xb in zip(ra[start:], rb[start:]):
            assert np.allclose(xa, xb, atol=1e-11)


def test_maxpool_agreement_with_ties():
    rng = np.random.default_rng(5)
    x = rng.integers(-2, 3, size=(3, 8, 8, 5)).astype(float)  # many ties
    ya, ia = kr.maxpool2_forward(x)
    yb, ib = kj.maxpool2_forward(x)
    assert np.array_equal(ya, yb)
    assert np.array_equal(ia, ib)
    gy = rng.normal(size=ya.shape)
    assert np.array_equal(kr.maxpool2_backward(gy, ia, 8, 8),
                          kj.maxpool2_backward(gy, ib, 8, 8))


@pytest.mark.parametrize("shape", [(2, 1, 30, 32), (2, 30, 1, 16),
                                   (1, 3, 5, 8)])
def test_conv_relu_pool_agreement(shape):
    b, ci, co, hw = shape
    rng = np.random.default_rng(6)
    x = rng.normal(size=(b, hw, hw, ci)) * (rng.uniform(size=(b, hw, hw, ci)) > 0.5)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    w = rng.normal(size=(3, 3, ci, co)) * 0.4
    bias = rng.normal(size=co) * 0.1
    pa, ia = kr.conv_relu_pool_forward(xp, w, bias)
    pb, ib = kj.conv_relu_pool_forward(xp, w, bias)
    assert np.allclose(pa, pb, atol=1e-12)
    assert np.array_equal(ia, ib)
    gy = rng.normal(size=pa.shape)
    for need in (True, False):
        ra = kr.conv_relu_pool_backward(xp, w, gy, pa, ia, need)
        rb = kj.conv_relu_pool_backward(xp, w, gy, pb, ib, need)
        start = 0 if need else 1
        for xa, xb in zip(ra[start:], rb[start:]):
            assert np.allclose(xa, xb, atol=1e-11)


def test_render_grid_cells_agreement():
    rng = np.random.default_rng(7)
    poly = np.array([[-10.0, -6.0], [30.0, -6.0], [30.0, 6.0], [-10.0, 6.0]])
    jj, ii = np.meshgrid(np.arange(16), np.arange(16))
    fx = (jj.ravel() - 4) * 1.0
    fy = (ii.ravel() - 8) * 1.0
    for _ in range(10):
        hx = rng.uniform(-8, 8, 30)
        hy = rng.uniform(-8, 8, 30)
        args = (rng.uniform(-2, 2), rng.uniform(-2, 2),
                math.cos(0.3), math.sin(0.3), fx, fy, poly, hx, hy,
                rng.uniform(-8, 8), rng.uniform(-8, 8), 16, 16, 1.0, 8, 4)
        assert np.array_equal(kr.render_grid_cells(*args),
                              kj.render_grid_cells(*args))


def test_rk4_step_agreement():
    rng = np.random.default_rng(8)
    for _ in range(50):
        args = (rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0, 3.3),
                rng.uniform(-3, 3), rng.uniform(-0.55, 0.55),
                rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2),
                0.1, 2.712, 4)
        assert kr.rk4_step(*args) == pytest.approx(kj.rk4_step(*args),
                                                   abs=1e-15)


def test_discounted_scan_agreement():
    rng = np.random.default_rng(9)
    deltas = rng.normal(size=500)
    ends = (rng.uniform(size=500) < 0.05).astype(np.uint8)
    ends[-1] = 1
    a = kr.discounted_scan(deltas, ends, 0.99 * 0.95)
    b = kj.discounted_scan(deltas, ends, 0.99 * 0.95)
    assert np.array_equal(a, b)
