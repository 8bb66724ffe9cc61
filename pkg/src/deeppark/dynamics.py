"""Kinematic single-track vehicle model.

State is the rear-axle pose plus speed and mean front-wheel angle; the
continuous dynamics are

    x' = v cos(heading),  y' = v sin(heading),  v' = accel,
    heading' = v / wheelbase * tan(steer),      steer' = steer_rate.

Steps integrate with classical RK4 and saturate speed and steering
afterwards.  Valid for the low-speed regime only (capped at 3.3 m/s); no
slip, no reverse gear.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels

SPEED_MAX = 3.3        # m/s
STEER_MAX = 0.55       # rad
ACCEL_MAX = 1.2        # m/s^2
STEER_RATE_MAX = 1.2   # rad/s
STEP_SECONDS = 0.1     # control period
RK4_SUBSTEPS = 4

TWO_PI = 2.0 * math.pi


class VehicleState(NamedTuple):
    x: float
    y: float
    speed: float
    heading: float
    steer: float


class Action(NamedTuple):
    accel: float
    steer_rate: float


@dataclass(frozen=True)
class VehicleGeometry:
    """Body rectangle of a Passat-class sedan, positioned off the rear axle."""

    wheelbase: float = 2.712
    body_length: float = 4.767
    body_width: float = 1.832
    rear_overhang: float = 1.1   # rear axle to rear bumper

    def __post_init__(self):
        if self.wheelbase <= 0 or self.body_length <= self.wheelbase:
            raise ValueError("body must be longer than a positive wheelbase")
        if self.body_width <= 0:
            raise ValueError("body width must be positive")


def wrap_angle(angle: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = (angle + math.pi) % TWO_PI - math.pi
    if wrapped == -math.pi:
        return math.pi
    return wrapped


def derivative(state: VehicleState, action: Action, wheelbase: float):
    """Right-hand side of the single-track ODE as a 5-tuple."""
    return (
        state.speed * math.cos(state.heading),
        state.speed * math.sin(state.heading),
        action.accel,
        state.speed / wheelbase * math.tan(state.steer),
        action.steer_rate,
    )


def step_raw(state: VehicleState, action: Action, dt: float,
             wheelbase: float = VehicleGeometry.wheelbase):
    """One integration step; returns (clamped state, raw unclamped speed).

    The raw speed (v before saturation) is what the overspeed termination
    check looks at.  Braking through v = 0 splits the step at the zero
    crossing so the vehicle parks instead of creeping backwards; the
    steering integral continues over the full dt either way.
    """
    raw_speed = state.speed + action.accel * dt
    x, y, v, heading, steer = state

    if raw_speed < 0.0 and state.speed >= 0.0:
        # v' = accel is exact, so the crossing time is analytic.
        t_cross = 0.0 if action.accel >= 0.0 else state.speed / -action.accel
        if t_cross > 0.0:
            x, y, v, heading, steer = kernels.rk4_step(
                x, y, v, heading, steer,
                action.accel, action.steer_rate, t_cross, wheelbase,
                RK4_SUBSTEPS,
            )
        v = 0.0
        steer += action.steer_rate * (dt - t_cross)
    else:
        x, y, v, heading, steer = kernels.rk4_step(
            x, y, v, heading, steer,
            action.accel, action.steer_rate, dt, wheelbase, RK4_SUBSTEPS,
        )

    v = min(max(v, 0.0), SPEED_MAX)
    steer = min(max(steer, -STEER_MAX), STEER_MAX)
    heading = wrap_angle(heading)
    return VehicleState(x, y, v, heading, steer), raw_speed


def step(state: VehicleState, action: Action, dt: float = STEP_SECONDS,
         wheelbase: float = VehicleGeometry.wheelbase) -> VehicleState:
    return step_raw(state, action, dt, wheelbase)[0]


def footprint(state: VehicleState, geom: VehicleGeometry) -> np.ndarray:
    """Body rectangle corners (4, 2) in the inertial frame, CCW from rear-right."""
    front = geom.body_length - geom.rear_overhang
    rear = -geom.rear_overhang
    half_w = 0.5 * geom.body_width
    local = np.array([
        [rear, -half_w],
        [front, -half_w],
        [front, half_w],
        [rear, half_w],
    ])
    c, s = math.cos(state.heading), math.sin(state.heading)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([state.x, state.y])
