"""Timing comparison of the numba kernels against the pure-numpy fallback.

Run:  python benchmarks/bench_kernels.py
The numba path is warmed up first, so JIT compilation is excluded.
"""

import math
import time

import numpy as np

from deeppark.kernels import jit as kj
from deeppark.kernels import ref as kr

REPEAT = 7


def bench(name, fn_ref, fn_jit, *args):
    fn_jit(*args)  # warm / compile
    times = {}
    for label, fn in (("numpy", fn_ref), ("numba", fn_jit)):
        best = math.inf
        for _ in range(REPEAT):
            t0 = time.perf_counter()
            fn(*args)
            best = min(best, time.perf_counter() - t0)
        times[label] = best
    speedup = times["numpy"] / times["numba"]
    print(f"{name:<34} numpy {times['numpy']*1e3:9.3f} ms   "
          f"numba {times['numba']*1e3:9.3f} ms   x{speedup:6.1f}")


def main():
    rng = np.random.default_rng(0)
    print(f"{'kernel':<34} {'fallback':>18} {'jit':>15}")

    segments = rng.uniform(-20, 20, size=(40, 4))
    angles = -math.pi + 2 * math.pi * np.arange(360) / 360
    bench("raycast (360 rays x 40 edges)", kr.raycast, kj.raycast,
          0.0, 0.0, np.cos(angles), np.sin(angles), segments, 20.0)

    poly = np.array([[-10.0, -6.0], [30.0, -6.0], [30.0, 6.0], [-10.0, 6.0]])
    px = rng.uniform(-12, 32, 1024)
    py = rng.uniform(-8, 8, 1024)
    bench("points_in_polygon (1024 pts)", kr.points_in_polygon,
          kj.points_in_polygon, px, py, poly)

    jj, ii = np.meshgrid(np.arange(32), np.arange(32))
    fx = (jj.ravel() - 6) * 1.0
    fy = (ii.ravel() - 16) * 1.0
    hx = rng.uniform(-10, 10, 240)
    hy = rng.uniform(-10, 10, 240)
    bench("render_grid_cells (32x32)", kr.render_grid_cells,
          kj.render_grid_cells, 0.5, -0.2, math.cos(0.4), math.sin(0.4),
          fx, fy, poly, hx, hy, 8.0, 1.0, 32, 32, 1.0, 16, 6)

    bench("rk4_step", kr.rk4_step, kj.rk4_step,
          0.0, 0.0, 2.0, 0.3, 0.2, 0.5, -0.3, 0.1, 2.712, 4)

    for batch in (1, 256):
        grid = rng.choice([-1.0, 0.0, 0.0, 0.0, 1.0],
                          size=(batch, 32, 32, 1))
        xp1 = np.pad(grid, ((0, 0), (1, 1), (1, 1), (0, 0)))
        w1 = rng.normal(size=(3, 3, 1, 30)) * 0.3
        b1 = np.zeros(30)
        bench(f"conv+relu+pool 1->30 fwd (B={batch})",
              kr.conv_relu_pool_forward, kj.conv_relu_pool_forward,
              xp1, w1, b1)
        p1, i1 = kj.conv_relu_pool_forward(xp1, w1, b1)
        gy = rng.normal(size=p1.shape)
        bench(f"conv+relu+pool 1->30 bwd (B={batch})",
              kr.conv_relu_pool_backward, kj.conv_relu_pool_backward,
              xp1, w1, gy, p1, i1, False)
        xp2 = np.pad(p1, ((0, 0), (1, 1), (1, 1), (0, 0)))
        w2 = rng.normal(size=(3, 3, 30, 1)) * 0.1
        b2 = np.zeros(1)
        bench(f"conv+relu+pool 30->1 fwd (B={batch})",
              kr.conv_relu_pool_forward, kj.conv_relu_pool_forward,
              xp2, w2, b2)
        p2, i2 = kj.conv_relu_pool_forward(xp2, w2, b2)
        gy2 = rng.normal(size=p2.shape)
        bench(f"conv+relu+pool 30->1 bwd (B={batch})",
              kr.conv_relu_pool_backward, kj.conv_relu_pool_backward,
              xp2, w2, gy2, p2, i2, True)

    x = rng.normal(size=(64, 32, 32, 8))
    bench("maxpool2 fwd (64x32x32x8)", kr.maxpool2_forward,
          kj.maxpool2_forward, x)

    deltas = rng.normal(size=16384)
    ends = (rng.uniform(size=16384) < 0.01).astype(np.uint8)
    ends[-1] = 1
    bench("discounted_scan (16384)", kr.discounted_scan, kj.discounted_scan,
          deltas, ends, 0.9405)


if __name__ == "__main__":
    main()
