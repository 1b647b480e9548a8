"""Analytic vehicle trajectories.

A horizontal path is a chain of constant-curvature segments (lines and arcs)
parametrised by arc length. A smooth speed profile maps time to arc length,
and altitude, roll and pitch get small sinusoidal oscillations. All
derivatives the IMU needs are closed-form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def rpy_rotmats(roll, pitch, yaw) -> np.ndarray:
    """Vectorised Z-Y-X Euler angles to (N, 3, 3) rotation matrices."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    R = np.empty((len(cr), 3, 3))
    R[:, 0, 0] = cy * cp
    R[:, 0, 1] = cy * sp * sr - sy * cr
    R[:, 0, 2] = cy * sp * cr + sy * sr
    R[:, 1, 0] = sy * cp
    R[:, 1, 1] = sy * sp * sr + cy * cr
    R[:, 1, 2] = sy * sp * cr - cy * sr
    R[:, 2, 0] = -sp
    R[:, 2, 1] = cp * sr
    R[:, 2, 2] = cp * cr
    return R


@dataclass(frozen=True)
class Segment:
    length: float
    curvature: float = 0.0  # 1/m, positive turns left


class Path:
    """Planar path made of constant-curvature segments."""

    def __init__(self, start_xy, start_heading: float, segments: list[Segment]):
        if not segments:
            raise ValueError("path needs at least one segment")
        self.segments = list(segments)
        self.start_xy = np.asarray(start_xy, dtype=float)
        self.start_heading = float(start_heading)
        starts = [(self.start_xy, self.start_heading)]
        for seg in self.segments[:-1]:
            p, h = starts[-1]
            starts.append(self._advance(p, h, seg.curvature, seg.length))
        self._seg_start_xy = np.array([s[0] for s in starts])
        self._seg_start_heading = np.array([s[1] for s in starts])
        self._lengths = np.array([s.length for s in self.segments])
        self._curv = np.array([s.curvature for s in self.segments])
        self._cum = np.concatenate(([0.0], np.cumsum(self._lengths)))

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    @staticmethod
    def _advance(p, heading, kappa, s):
        if kappa == 0.0:
            return p + s * np.array([np.cos(heading), np.sin(heading)]), heading
        h1 = heading + kappa * s
        dp = np.array([np.sin(h1) - np.sin(heading), -np.cos(h1) + np.cos(heading)]) / kappa
        return p + dp, h1

    def evaluate(self, s):
        """Return (xy, heading, curvature) at arc length(s) ``s``."""
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        idx = np.clip(np.searchsorted(self._cum, s, side="right") - 1, 0, len(self.segments) - 1)
        ds = s - self._cum[idx]
        k = self._curv[idx]
        h0 = self._seg_start_heading[idx]
        p0 = self._seg_start_xy[idx]
        h = h0 + k * ds
        straight = k == 0.0
        safe_k = np.where(straight, 1.0, k)
        dx = np.where(straight, ds * np.cos(h0), (np.sin(h) - np.sin(h0)) / safe_k)
        dy = np.where(straight, ds * np.sin(h0), (np.cos(h0) - np.cos(h)) / safe_k)
        xy = p0 + np.stack([dx, dy], axis=-1)
        return xy, h, k

    def end_state(self):
        xy, h, _ = self.evaluate(self.length)
        return xy, float(h)


@dataclass(frozen=True)
class SpeedProfile:
    """Speed ramps from ``v_start`` to ``v_cruise`` with a smoothstep over ``ramp_time``."""

    v_start: float
    v_cruise: float
    ramp_time: float

    def _x(self, t):
        if self.ramp_time <= 0.0:
            return np.ones_like(t)
        return np.clip(t / self.ramp_time, 0.0, 1.0)

    def distance(self, t):
        t = np.asarray(t, dtype=float)
        dv = self.v_cruise - self.v_start
        if self.ramp_time <= 0.0:
            return self.v_cruise * t
        x = self._x(t)
        ramp = self.v_start * t + dv * self.ramp_time * (x ** 3 - 0.5 * x ** 4)
        after = self.v_start * t + dv * (t - 0.5 * self.ramp_time)
        return np.where(t < self.ramp_time, ramp, after)

    def speed(self, t):
        t = np.asarray(t, dtype=float)
        x = self._x(t)
        return self.v_start + (self.v_cruise - self.v_start) * x * x * (3.0 - 2.0 * x)

    def accel(self, t):
        t = np.asarray(t, dtype=float)
        if self.ramp_time <= 0.0:
            return np.zeros_like(t)
        x = self._x(t)
        a = (self.v_cruise - self.v_start) / self.ramp_time * 6.0 * x * (1.0 - x)
        return np.where(t < self.ramp_time, a, 0.0)

    def time_for_distance(self, s: float) -> float:
        lo, hi = 0.0, 1.0
        while self.distance(hi) < s:
            hi *= 2.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if self.distance(mid) < s:
                lo = mid
            else:
                hi = mid
        return hi


@dataclass(frozen=True)
class Oscillation:
    amplitude: float = 0.0
    period: float = 1.0
    phase: float = 0.0

    def value(self, t):
        return self.amplitude * np.sin(2 * np.pi * t / self.period + self.phase)

    def rate(self, t):
        w = 2 * np.pi / self.period
        return self.amplitude * w * np.cos(w * t + self.phase)

    def accel(self, t):
        w = 2 * np.pi / self.period
        return -self.amplitude * w * w * np.sin(w * t + self.phase)


@dataclass(frozen=True)
class TrajectoryState:
    t: np.ndarray
    position: np.ndarray  # (N, 3) world
    velocity: np.ndarray  # (N, 3) world
    acceleration: np.ndarray  # (N, 3) world
    rotation: np.ndarray  # (N, 3, 3) world <- body
    omega_body: np.ndarray  # (N, 3)


class Trajectory:
    """Time-parametrised 6-DoF vehicle motion with analytic derivatives."""

    def __init__(self, path: Path, speed: SpeedProfile, altitude: float, floor_z: float = 0.0,
                 heave: Oscillation = Oscillation(), roll: Oscillation = Oscillation(),
                 pitch: Oscillation = Oscillation()):
        self.path = path
        self.speed = speed
        self.base_z = floor_z + altitude
        self.heave = heave
        self.roll = roll
        self.pitch = pitch
        self.duration = speed.time_for_distance(path.length)

    def evaluate(self, t) -> TrajectoryState:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s = self.speed.distance(t)
        sd = self.speed.speed(t)
        sdd = self.speed.accel(t)
        xy, psi, kappa = self.path.evaluate(s)
        tangent = np.stack([np.cos(psi), np.sin(psi)], axis=-1)
        normal = np.stack([-np.sin(psi), np.cos(psi)], axis=-1)
        # past the end of the path the vehicle stops
        moving = s <= self.path.length
        sd = np.where(moving, sd, 0.0)
        sdd = np.where(moving, sdd, 0.0)

        z = self.base_z + self.heave.value(t)
        pos = np.column_stack([xy, z])
        vel = np.column_stack([tangent * sd[:, None], self.heave.rate(t)])
        acc_xy = tangent * sdd[:, None] + normal * (kappa * sd * sd)[:, None]
        acc = np.column_stack([acc_xy, self.heave.accel(t)])

        phi, phid = self.roll.value(t), self.roll.rate(t)
        th, thd = self.pitch.value(t), self.pitch.rate(t)
        psid = kappa * sd
        R = rpy_rotmats(phi, th, psi)
        # Z-Y-X Euler rates to body angular velocity
        wx = phid - psid * np.sin(th)
        wy = thd * np.cos(phi) + psid * np.cos(th) * np.sin(phi)
        wz = -thd * np.sin(phi) + psid * np.cos(th) * np.cos(phi)
        omega = np.column_stack([wx, wy, wz])
        return TrajectoryState(t, pos, vel, acc, R, omega)


# --------------------------------------------------------------------------
# path families
# --------------------------------------------------------------------------

def keyhole_turn(small_radius: float, big_radius: float) -> list[Segment]:
    """Turn that comes back onto the incoming line with reversed heading.

    Right arc, large left arc, right arc; ``cos(alpha) = a / (a + b)`` puts
    the large circle's centre on the incoming line, so the exit point equals
    the entry point.
    """
    a, b = small_radius, big_radius
    alpha = np.arccos(a / (a + b))
    return [
        Segment(a * alpha, -1.0 / a),
        Segment(b * (np.pi + 2.0 * alpha), 1.0 / b),
        Segment(a * alpha, -1.0 / a),
    ]


def reversed_segments(segments: list[Segment]) -> list[Segment]:
    """The same geometric path traversed backwards (after a 180 deg turn in place)."""
    return [Segment(s.length, -s.curvature) for s in reversed(segments)]


def lawnmower_segments(lane_length: float, lane_spacing: float, lanes: int,
                       keyhole_radii=(1.0, 1.5)) -> list[Segment]:
    """Survey lanes joined by U-turns, then a keyhole turn and the whole survey
    retraced in reverse so every lane is revisited at ~180 deg."""
    survey: list[Segment] = []
    r = 0.5 * lane_spacing
    for i in range(lanes):
        survey.append(Segment(lane_length))
        if i < lanes - 1:
            side = 1.0 if i % 2 == 0 else -1.0
            survey.append(Segment(np.pi * r, side / r))
    return survey + keyhole_turn(*keyhole_radii) + reversed_segments(survey)


def out_and_back_segments(line_length: float, keyhole_radii=(1.0, 1.5)) -> list[Segment]:
    return [Segment(line_length)] + keyhole_turn(*keyhole_radii) + [Segment(line_length)]


def cruise_segments(total_length: float, radius: float, arc_angle: float = np.pi / 2) -> list[Segment]:
    """Gentle S-curves: alternating left/right arcs of a large radius."""
    segs: list[Segment] = []
    arc_len = radius * arc_angle
    remaining = total_length
    side = 1.0
    while remaining > 1e-9:
        seg_len = min(arc_len, remaining)
        segs.append(Segment(seg_len, side / radius))
        remaining -= seg_len
        side = -side
    return segs
