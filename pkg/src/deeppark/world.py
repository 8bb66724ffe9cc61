"""Parking-lot worlds: scenario generation, collision tests, range sensing,
and the vehicle-relative perception grid.

Scenarios are rectilinear corridors with optional 90-degree turns and
parking-bay rows; obstacle vehicles sit in bays or hug the lane edges.
Everything is generated from an integer seed, so scenarios are reproducible
and parallel workers can use disjoint seed streams.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import kernels
from .dynamics import (
    SPEED_MAX,
    STEER_MAX,
    VehicleGeometry,
    VehicleState,
    footprint,
    wrap_angle,
)

GEOM_TOL = 1e-9

# Perception-grid cell values.
OCCUPIED = -1
FREE = 0
TARGET = 1


class GenerationFailed(RuntimeError):
    """Rejection sampling gave up; the scenario config is over-constrained."""


@dataclass(frozen=True)
class TargetState:
    x: float
    y: float
    heading: float
    speed: float


@dataclass(frozen=True)
class ObstacleRect:
    """Oriented rectangle (an obstacle vehicle), center + extents + heading."""

    x: float
    y: float
    length: float
    width: float
    heading: float

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])


@dataclass(frozen=True)
class SensorScan:
    """Equally spaced range measurements, bearings relative to the heading."""

    bearings: np.ndarray      # (R,), strictly increasing over [-pi, pi)
    distances: np.ndarray     # (R,), np.inf where nothing was hit
    hits: np.ndarray          # (R,) bool
    max_range: float


@dataclass(frozen=True)
class GridSpec:
    """Perception-grid layout: the vehicle sits at the anchor cell facing +x
    along the column axis; rows grow to the vehicle's left."""

    rows: int = 32
    cols: int = 32
    cell_size: float = 1.0
    anchor_row: int = 16
    anchor_col: int = 6


@dataclass(frozen=True)
class ScenarioConfig:
    lane_width: tuple = (4.5, 7.0)
    max_turns: int = 2
    target_distance: tuple = (5.0, 30.0)
    target_speed: tuple = (0.5, 3.3)   # (0.0, 0.0) for stopping tasks
    obstacles: bool = False            # True = regime with obstacle vehicles
    obstacle_count: tuple = (2, 6)
    bay_fraction: float = 0.5          # chance a long wall grows a bay row
    back_margin: float = 3.0           # corridor behind the start pose
    end_margin: float = 6.0            # corridor past the target


@dataclass(frozen=True)
class Scenario:
    boundary: np.ndarray               # (V, 2) simple polygon
    obstacles: tuple
    start: VehicleState
    target: TargetState
    seed: int
    _segments: np.ndarray = field(default=None, repr=False, compare=False)

    def segments(self) -> np.ndarray:
        """All boundary plus obstacle edges as an (E, 4) array for raycasts."""
        if self._segments is None:
            chains = [self.boundary] + [o.corners() for o in self.obstacles]
            segs = []
            for pts in chains:
                nxt = np.roll(pts, -1, axis=0)
                segs.append(np.hstack([pts, nxt]))
            object.__setattr__(self, "_segments", np.vstack(segs))
        return self._segments

    def content_id(self) -> str:
        payload = json.dumps(scenario_to_dict(self), sort_keys=True,
                             separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# polygon helpers

def polygon_area(polygon: np.ndarray) -> float:
    x, y = polygon[:, 0], polygon[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_is_simple(polygon: np.ndarray) -> bool:
    """No self-crossings, no collinear overlap between non-adjacent edges,
    no repeated vertices."""
    n = polygon.shape[0]
    if n < 3:
        return False
    for i in range(n):
        if np.allclose(polygon[i], polygon[(i + 1) % n]):
            return False
    from .kernels import ref as _ref
    for i in range(n):
        a1, a2 = polygon[i], polygon[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            b1, b2 = polygon[j], polygon[(j + 1) % n]
            if _ref._proper_crossing(a1, a2, b1, b2):
                return False
            if _segments_collinear_overlap(a1, a2, b1, b2):
                return False
    return True


def _segments_collinear_overlap(a1, a2, b1, b2, tol=1e-9):
    d = a2 - a1
    ll = float(d @ d)
    if ll <= 0.0:
        return True
    # both b endpoints within tol of the carrier line of a?
    for p in (b1, b2):
        cross = d[0] * (p[1] - a1[1]) - d[1] * (p[0] - a1[0])
        if abs(cross) > tol * math.sqrt(ll):
            return False
    ta = sorted((0.0, 1.0))
    tb = sorted((float(d @ (b1 - a1)) / ll, float(d @ (b2 - a1)) / ll))
    overlap = min(ta[1], tb[1]) - max(ta[0], tb[0])
    return overlap > tol


# ---------------------------------------------------------------------------
# corridor construction

_DIRS = {0: (1.0, 0.0), 1: (0.0, 1.0), 2: (-1.0, 0.0), 3: (0.0, -1.0)}


def _left_normal(d):
    return (-d[1], d[0])


def _offset_chain(points, dirs, offset):
    """Offset an axis-aligned polyline to one side with square corners."""
    chain = [(points[0][0] + offset * _left_normal(dirs[0])[0],
              points[0][1] + offset * _left_normal(dirs[0])[1])]
    for k in range(1, len(dirs)):
        prev_d, next_d = dirs[k - 1], dirs[k]
        corner = points[k]
        # Each axis-aligned offset line pins one coordinate; the square
        # corner is their intersection.
        pn, nn = _left_normal(prev_d), _left_normal(next_d)
        if abs(prev_d[0]) > 0.5:   # horizontal segment pins y
            cy = corner[1] + offset * pn[1]
            cx = corner[0] + offset * nn[0]
        else:
            cy = corner[1] + offset * nn[1]
            cx = corner[0] + offset * pn[0]
        chain.append((cx, cy))
    chain.append((points[-1][0] + offset * _left_normal(dirs[-1])[0],
                  points[-1][1] + offset * _left_normal(dirs[-1])[1]))
    return chain


@dataclass
class _Bay:
    segment: int      # index into the centerline segment list
    side: int         # +1 left, -1 right
    start: float      # arc position along the segment
    end: float
    depth: float


def _insert_bays(chain, points, dirs, seg_lens, half, side, bays):
    """Splice bay detours into one side chain of the corridor polygon."""
    out = []
    for k in range(len(dirs)):
        out.append(chain[k])
        for bay in bays:
            if bay.segment != k or bay.side != side:
                continue
            d = dirs[k]
            n = _left_normal(d)
            sgn = 1.0 if side == 1 else -1.0
            base = np.array(points[k])
            dvec = np.array(d)
            nvec = np.array(n) * sgn * half
            outv = np.array(n) * sgn * bay.depth
            a = base + bay.start * dvec + nvec
            b = base + bay.end * dvec + nvec
            # forward arc order on both sides; the right chain is reversed
            # wholesale during polygon assembly
            out.extend([tuple(a), tuple(a + outv), tuple(b + outv), tuple(b)])
    out.append(chain[-1])
    return out


def _build_polygon(points, dirs, half, bays):
    left = _offset_chain(points, dirs, half)
    right = _offset_chain(points, dirs, -half)
    left = _insert_bays(left, points, dirs, None, half, 1, bays)
    right = _insert_bays(right, points, dirs, None, half, -1, bays)
    poly = left + right[::-1]
    arr = np.array(poly)
    if polygon_area(arr) < 0:
        arr = arr[::-1].copy()
    return arr


def _path_point(points, dirs, seg_lens, arc):
    """Point, direction index, and segment index at arc length along the path."""
    remaining = arc
    for k, ln in enumerate(seg_lens):
        if remaining <= ln or k == len(seg_lens) - 1:
            d = _DIRS[dirs[k]] if isinstance(dirs[k], int) else dirs[k]
            return (points[k][0] + remaining * d[0],
                    points[k][1] + remaining * d[1], k)
        remaining -= ln
    raise AssertionError("arc beyond path")


# ---------------------------------------------------------------------------
# generation

CAR_LENGTH = 4.8
CAR_WIDTH = 1.9
BAY_DEPTH = 5.0
BAY_SLOT = 2.7


def generate_scenario(config: ScenarioConfig, seed: int,
                      geom: VehicleGeometry = VehicleGeometry()) -> Scenario:
    """Draw one scenario from the start distribution.

    Raises GenerationFailed after 100 whole-scenario attempts.
    """
    rng = np.random.default_rng(np.uint64(seed) if seed >= 0 else seed)
    for _ in range(100):
        scenario = _try_generate(config, rng, seed, geom)
        if scenario is not None:
            return scenario
    raise GenerationFailed(f"no valid scenario after 100 attempts (seed {seed})")


def _try_generate(cfg, rng, seed, geom):
    lane_w = rng.uniform(*cfg.lane_width)
    half = 0.5 * lane_w
    target_dist = rng.uniform(*cfg.target_distance)
    total = cfg.back_margin + target_dist + cfg.end_margin

    min_run = lane_w + 3.0
    n_turns = int(rng.integers(0, cfg.max_turns + 1)) if cfg.max_turns else 0
    lo, hi = cfg.back_margin + min_run, total - min_run
    turn_arcs = []
    if n_turns and hi - lo > n_turns * min_run:
        for _ in range(20):
            cand = np.sort(rng.uniform(lo, hi, size=n_turns))
            if n_turns == 1 or np.min(np.diff(cand)) >= min_run:
                turn_arcs = list(cand)
                break
    arcs = [0.0] + turn_arcs + [total]
    seg_lens = list(np.diff(arcs))

    dir_idx = [0]
    for _ in turn_arcs:
        dir_idx.append((dir_idx[-1] + int(rng.choice([1, 3]))) % 4)
    dirs = [_DIRS[d] for d in dir_idx]

    points = [(-cfg.back_margin, 0.0)]
    for d, ln in zip(dirs, seg_lens):
        points.append((points[-1][0] + d[0] * ln, points[-1][1] + d[1] * ln))

    bays = []
    for k, ln in enumerate(seg_lens):
        margin = half + 2.0
        room = ln - 2.0 * margin
        if room < BAY_SLOT or rng.uniform() > cfg.bay_fraction:
            continue
        slots = int(min(3, room // BAY_SLOT))
        span = slots * BAY_SLOT
        s0 = rng.uniform(margin, ln - margin - span)
        bays.append(_Bay(k, int(rng.choice([1, -1])), s0, s0 + span, BAY_DEPTH))

    boundary = _build_polygon(points[:-1] + [points[-1]], dirs, half, bays)
    if not polygon_is_simple(boundary):
        return None

    tx, ty, tseg = _path_point(points, dirs, seg_lens,
                               cfg.back_margin + target_dist)
    t_heading = math.atan2(dirs[tseg][1], dirs[tseg][0])
    t_speed = float(rng.uniform(*cfg.target_speed))
    target = TargetState(float(tx), float(ty), wrap_angle(t_heading), t_speed)

    start = VehicleState(
        0.0, 0.0,
        float(rng.uniform(0.0, SPEED_MAX)),
        0.0,
        float(rng.uniform(-STEER_MAX, STEER_MAX)),
    )
    start_corners = footprint(start, geom)
    if not kernels.rect_inside_polygon(start_corners, boundary, GEOM_TOL):
        return None

    obstacles = []
    if cfg.obstacles:
        want = int(rng.integers(cfg.obstacle_count[0], cfg.obstacle_count[1] + 1))
        obstacles = _place_obstacles(
            rng, want, points, dirs, seg_lens, half, bays,
            start_corners, target, boundary,
        )

    scenario = Scenario(boundary, tuple(obstacles), start, target, seed)
    return scenario if scenario_valid(scenario, geom) else None


def _place_obstacles(rng, want, points, dirs, seg_lens, half, bays,
                     start_corners, target, boundary):
    placed = []

    def admissible(rect):
        corners = rect.corners()
        if kernels.rects_overlap(corners, start_corners, -0.8):
            return False
        if _point_rect_dist(target.x, target.y, rect) < 2.0:
            return False
        for other in placed:
            if kernels.rects_overlap(corners, other.corners(), -0.2):
                return False
        return True

    # fill bay slots first, then hug lane edges
    slots = []
    for bay in bays:
        d = np.array(dirs[bay.segment])
        n = np.array(_left_normal(dirs[bay.segment])) * (1.0 if bay.side == 1 else -1.0)
        base = np.array(points[bay.segment])
        n_slots = int((bay.end - bay.start) // BAY_SLOT)
        for s in range(n_slots):
            center_arc = bay.start + (s + 0.5) * BAY_SLOT
            slots.append((base, d, n, center_arc, bay))
    rng.shuffle(slots)

    for base, d, n, arc, bay in slots:
        if len(placed) >= want:
            break
        if rng.uniform() > 0.7:
            continue
        length = CAR_LENGTH * rng.uniform(0.92, 1.05)
        width = CAR_WIDTH * rng.uniform(0.92, 1.05)
        intrusion = rng.uniform(-0.2, 0.8)
        lateral = half - intrusion + 0.5 * length
        center = base + arc * d + lateral * n
        heading = math.atan2(n[1], n[0]) + rng.normal(0.0, 0.03)
        rect = ObstacleRect(float(center[0]), float(center[1]),
                            length, width, wrap_angle(heading))
        if admissible(rect):
            placed.append(rect)

    for _ in range(40):
        if len(placed) >= want:
            break
        k = int(rng.integers(0, len(seg_lens)))
        ln = seg_lens[k]
        margin = half + 3.0
        if ln < 2 * margin + CAR_LENGTH:
            continue
        arc = rng.uniform(margin + 0.5 * CAR_LENGTH, ln - margin - 0.5 * CAR_LENGTH)
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        d = np.array(dirs[k])
        n = np.array(_left_normal(dirs[k])) * side
        length = CAR_LENGTH * rng.uniform(0.92, 1.05)
        width = CAR_WIDTH * rng.uniform(0.92, 1.05)
        clearance = rng.uniform(0.05, 0.35)
        center = (np.array(points[k]) + arc * d
                  + (half - clearance - 0.5 * width) * n)
        heading = math.atan2(d[1], d[0]) + rng.normal(0.0, 0.03)
        rect = ObstacleRect(float(center[0]), float(center[1]),
                            length, width, wrap_angle(heading))
        if admissible(rect):
            placed.append(rect)
    return placed


def _point_rect_dist(px, py, rect: ObstacleRect):
    from .kernels import ref as _ref
    corners = rect.corners()
    best = math.inf
    for k in range(4):
        a, b = corners[k], corners[(k + 1) % 4]
        best = min(best, _ref._point_segment_dist_sq(px, py, a[0], a[1], b[0], b[1]))
    inside = kernels.points_in_polygon(np.array([px]), np.array([py]), corners)[0]
    return 0.0 if inside else math.sqrt(best)


def scenario_valid(scenario: Scenario, geom: VehicleGeometry = VehicleGeometry()) -> bool:
    """Check every scenario invariant (used after generation and in tests)."""
    if not polygon_is_simple(scenario.boundary):
        return False
    start = scenario.start
    if not (0.0 <= start.speed <= SPEED_MAX and abs(start.steer) <= STEER_MAX):
        return False
    if not kernels.rect_inside_polygon(footprint(start, geom),
                                       scenario.boundary, GEOM_TOL):
        return False
    tgt = scenario.target
    if not (0.0 <= tgt.speed <= SPEED_MAX):
        return False
    if not kernels.point_in_polygon_closed(tgt.x, tgt.y, scenario.boundary, GEOM_TOL):
        return False
    for obs in scenario.obstacles:
        if kernels.points_in_polygon(np.array([tgt.x]), np.array([tgt.y]),
                                     obs.corners())[0]:
            return False
    return True


# ---------------------------------------------------------------------------
# collision, sensing, perception

def collides(state: VehicleState, geom: VehicleGeometry,
             scenario: Scenario) -> bool:
    """True iff the body rectangle leaves the boundary or meets an obstacle.

    Tangent contact (zero penetration) does not count.
    """
    corners = footprint(state, geom)
    if not kernels.rect_inside_polygon(corners, scenario.boundary, GEOM_TOL):
        return True
    for obs in scenario.obstacles:
        if kernels.rects_overlap(corners, obs.corners(), GEOM_TOL):
            return True
    return False


@lru_cache(maxsize=8)
def _bearing_table(rays: int):
    bearings = -math.pi + 2.0 * math.pi * np.arange(rays) / rays
    return bearings, np.cos(bearings), np.sin(bearings)


def scan(state: VehicleState, scenario: Scenario, rays: int = 360,
         max_range: float = 20.0, noise_std: float = 0.0,
         rng: np.random.Generator = None) -> SensorScan:
    """Cast equally spaced rays from the rear-axle origin.

    Bearings are vehicle-relative over [-pi, pi).  Optional Gaussian range
    noise models a real sensor; it is off by default.
    """
    bearings, cos_b, sin_b = _bearing_table(rays)
    ch, sh = math.cos(state.heading), math.sin(state.heading)
    distances = kernels.raycast(
        state.x, state.y, cos_b * ch - sin_b * sh, sin_b * ch + cos_b * sh,
        scenario.segments(), max_range,
    )
    hits = np.isfinite(distances)
    if noise_std > 0.0 and rng is not None:
        noisy = distances[hits] + rng.normal(0.0, noise_std, size=int(hits.sum()))
        distances = distances.copy()
        distances[hits] = np.clip(noisy, 1e-3, max_range)
    return SensorScan(bearings, distances, hits, max_range)


def scan_points(state: VehicleState, sensor: SensorScan) -> np.ndarray:
    """World coordinates of the hit points, shape (H, 2)."""
    b = sensor.bearings[sensor.hits] + state.heading
    d = sensor.distances[sensor.hits]
    return np.stack([state.x + d * np.cos(b), state.y + d * np.sin(b)], axis=1)


@lru_cache(maxsize=8)
def _cell_centers(rows, cols, cell_size, anchor_row, anchor_col):
    jj, ii = np.meshgrid(np.arange(cols), np.arange(rows))
    fx = (jj.ravel() - anchor_col) * cell_size
    fy = (ii.ravel() - anchor_row) * cell_size
    return fx, fy


def render_grid(state: VehicleState, scenario: Scenario, sensor: SensorScan,
                spec: GridSpec = GridSpec()) -> np.ndarray:
    """Vehicle-frame occupancy grid with values {-1, 0, +1}.

    -1: cell center outside the drivable polygon, or a sensor hit landed in
    the cell; +1: the cell holding the target, if free and in range; 0
    otherwise.  The target never overwrites an occupied cell.
    """
    fx, fy = _cell_centers(spec.rows, spec.cols, spec.cell_size,
                           spec.anchor_row, spec.anchor_col)
    c, s = math.cos(state.heading), math.sin(state.heading)
    hit_b = sensor.bearings[sensor.hits]
    hit_d = sensor.distances[sensor.hits]
    hit_fx = hit_d * np.cos(hit_b)
    hit_fy = hit_d * np.sin(hit_b)
    dx, dy = scenario.target.x - state.x, scenario.target.y - state.y
    return kernels.render_grid_cells(
        state.x, state.y, c, s, fx, fy, scenario.boundary,
        hit_fx, hit_fy, c * dx + s * dy, -s * dx + c * dy,
        spec.rows, spec.cols, spec.cell_size,
        spec.anchor_row, spec.anchor_col,
    )


# ---------------------------------------------------------------------------
# serialization

SCENARIO_FORMAT = "deeppark-scenario-v1"


def scenario_to_dict(scenario: Scenario) -> dict:
    return {
        "format": SCENARIO_FORMAT,
        "seed": int(scenario.seed),
        "boundary": [[float(x), float(y)] for x, y in scenario.boundary],
        "obstacles": [
            {"x": o.x, "y": o.y, "length": o.length, "width": o.width,
             "heading": o.heading}
            for o in scenario.obstacles
        ],
        "start": {
            "x": scenario.start.x, "y": scenario.start.y,
            "speed": scenario.start.speed, "heading": scenario.start.heading,
            "steer": scenario.start.steer,
        },
        "target": {
            "x": scenario.target.x, "y": scenario.target.y,
            "heading": scenario.target.heading, "speed": scenario.target.speed,
        },
    }


def scenario_from_dict(data: dict) -> Scenario:
    if data.get("format") != SCENARIO_FORMAT:
        raise ValueError(f"unsupported scenario format: {data.get('format')!r}")
    return Scenario(
        boundary=np.array(data["boundary"], dtype=np.float64),
        obstacles=tuple(ObstacleRect(**o) for o in data["obstacles"]),
        start=VehicleState(**data["start"]),
        target=TargetState(**data["target"]),
        seed=int(data["seed"]),
    )


def save_scenario(scenario: Scenario, path) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(scenario), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return scenario_from_dict(json.load(fh))
