"""Continuous-time TCP reference trajectories and horizon-window sampling.

Both generators are exact closed-form curves with analytic velocities, so
they can be evaluated at any instant.  The spiral is Archimedean
(r = r0 + b*phi) traversed at linearly increasing tangential speed
v(t) = v0 + a*t; the angle at a given arc length is recovered by inverting
the closed-form arc-length relation with bisection.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np


class TrajectoryKind(enum.Enum):
    CIRCLE = "circle"
    SPIRAL = "spiral"


@dataclass(frozen=True)
class TrajectorySpec:
    """Geometric description of a reference path in the xy-plane."""

    kind: TrajectoryKind = TrajectoryKind.CIRCLE
    center: np.ndarray = field(default_factory=lambda: np.array([2.8, 0.6]))
    radius: float = 0.4          # r0 [m]
    speed: float = 0.5           # tangential speed v0 [m/s]
    growth: float = 0.02         # spiral radial growth b [m/rad]; circle ignores
    accel: float = 0.01          # spiral tangential acceleration a [m/s^2]
    t_offset: float = 0.0        # start time offset [s]

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.radius <= 0.0:
            raise ValueError("radius must be positive")
        if self.speed < 0.0:
            raise ValueError("speed must be non-negative")


@dataclass(frozen=True)
class ReferenceWindow:
    """N+1 reference samples spaced exactly dt, starting at t0."""

    x_ref: np.ndarray       # (N+1, 2)
    xd_ref: np.ndarray      # (N+1, 2)
    t0: float
    dt: float

    def __post_init__(self):
        if self.x_ref.shape != self.xd_ref.shape or self.x_ref.shape[1] != 2:
            raise ValueError("reference arrays must both be (N+1, 2)")


def _spiral_arc_length(r: float, b: float) -> float:
    """Closed-form antiderivative of sqrt(r^2 + b^2) dphi with r = r0 + b*phi."""
    return 0.5 * (r * math.hypot(r, b) + b * b * math.asinh(r / b)) / b


def _spiral_angle(s: float, r0: float, b: float) -> float:
    """Angle phi where the spiral arc length from phi=0 equals s.

    Bracketed Newton iteration on the monotone closed-form arc length,
    driven well below 1e-10 so that downstream finite differencing of the
    position stays clean.
    """
    if s <= 0.0:
        return 0.0
    base = _spiral_arc_length(r0, b)

    def length(phi: float) -> float:
        return _spiral_arc_length(r0 + b * phi, b) - base

    hi = max(1.0, s / r0)
    while length(hi) < s:
        hi *= 2.0
    lo = 0.0
    # good starter: neglect the b^2 term of the arc length element
    phi = (math.sqrt(r0 * r0 + 2.0 * b * s) - r0) / b
    phi = min(max(phi, lo), hi)
    for _ in range(60):
        err = length(phi) - s
        if abs(err) <= 1e-13 * max(1.0, s):
            break
        if err > 0.0:
            hi = phi
        else:
            lo = phi
        step = err / math.hypot(r0 + b * phi, b)
        phi_new = phi - step
        if not (lo < phi_new < hi):
            phi_new = 0.5 * (lo + hi)
        if abs(phi_new - phi) <= 1e-15 * max(1.0, phi):
            phi = phi_new
            break
        phi = phi_new
    return phi


def evaluate(spec: TrajectorySpec, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Reference position and velocity (x_ref, xd_ref) at time t >= 0."""
    t = float(t) + spec.t_offset
    if spec.kind is TrajectoryKind.CIRCLE:
        phi = spec.speed * t / spec.radius
        c, s = math.cos(phi), math.sin(phi)
        x = spec.center + spec.radius * np.array([c, s])
        xd = spec.speed * np.array([-s, c])
        return x, xd

    # spiral: arc length s(t) = v0 t + a t^2 / 2, r(phi) = r0 + b phi
    b = spec.growth
    s_arc = spec.speed * t + 0.5 * spec.accel * t * t
    phi = _spiral_angle(s_arc, spec.radius, b)
    r = spec.radius + b * phi
    s_dot = spec.speed + spec.accel * t
    phi_dot = s_dot / math.hypot(r, b)
    r_dot = b * phi_dot
    c, sn = math.cos(phi), math.sin(phi)
    x = spec.center + r * np.array([c, sn])
    xd = np.array([r_dot * c - r * sn * phi_dot,
                   r_dot * sn + r * c * phi_dot])
    return x, xd


def sample_window(spec: TrajectorySpec, t0: float, n_nodes: int, dt: float) -> ReferenceWindow:
    """Sample N+1 reference points at t0 + k*dt for k = 0..N."""
    if n_nodes < 2:
        raise ValueError("horizon must have at least 2 nodes")
    x = np.empty((n_nodes + 1, 2))
    xd = np.empty((n_nodes + 1, 2))
    for k in range(n_nodes + 1):
        x[k], xd[k] = evaluate(spec, t0 + k * dt)
    return ReferenceWindow(x_ref=x, xd_ref=xd, t0=float(t0), dt=float(dt))
