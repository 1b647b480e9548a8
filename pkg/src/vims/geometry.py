"""Rotations, rigid transforms and frame bookkeeping.

Quaternions are Hamilton, stored as ``np.ndarray`` of shape (4,) in
``[w, x, y, z]`` order. Only the functions in this module read or build raw
quaternion components; everything else goes through them.

Rotation perturbations are right-multiplicative throughout the package:
``R <- R @ exp(dtheta)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

SMALL_ANGLE = 1e-6

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


class FrameTag(enum.Enum):
    WORLD = "world"
    BODY = "body"
    CAMERA = "camera"
    SONAR = "sonar"
    LOCAL = "local"


class FrameMismatch(AssertionError):
    pass


@dataclass(frozen=True)
class WorldConstants:
    """Gravity and the geomagnetic field, both expressed in the ENU world frame."""

    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    geomagnetic_field_world: np.ndarray = field(
        default_factory=lambda: np.array([0.0, 30.0, -40.0])
    )  # microtesla

    def __post_init__(self):
        g = np.asarray(self.gravity, dtype=float)
        b = np.asarray(self.geomagnetic_field_world, dtype=float)
        if g.shape != (3,) or b.shape != (3,):
            raise ValueError("gravity and geomagnetic field must be 3-vectors")
        if g[2] >= 0.0:
            raise ValueError("gravity must point down (negative z)")
        object.__setattr__(self, "gravity", g)
        object.__setattr__(self, "geomagnetic_field_world", b)


# --------------------------------------------------------------------------
# so(3) helpers on rotation matrices
# --------------------------------------------------------------------------

_I3 = np.eye(3)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_rotmat(omega) -> np.ndarray:
    """Rodrigues formula, with a Taylor branch below ``SMALL_ANGLE``."""
    omega = np.asarray(omega, dtype=float)
    theta = math.sqrt(float(omega @ omega))
    K = skew(omega)
    if theta < SMALL_ANGLE:
        return _I3 + K + 0.5 * (K @ K)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return _I3 + a * K + b * (K @ K)


def log_rotmat(R) -> np.ndarray:
    return so3_log(rotmat_to_quat(R))


def right_jacobian(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = math.sqrt(float(phi @ phi))
    K = skew(phi)
    if theta < 1e-5:
        return _I3 - 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    return _I3 - (1.0 - math.cos(theta)) / t2 * K + (theta - math.sin(theta)) / (t2 * theta) * (K @ K)


def right_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = math.sqrt(float(phi @ phi))
    K = skew(phi)
    if theta < 1e-5:
        return _I3 + 0.5 * K + (K @ K) / 12.0
    c = 1.0 / (theta * theta) - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return _I3 + 0.5 * K + c * (K @ K)


# --------------------------------------------------------------------------
# quaternions
# --------------------------------------------------------------------------

def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / math.sqrt(float(q @ q))


def quat_canonical(q) -> np.ndarray:
    """Pick the representative with ``w >= 0`` (ties resolved on the vector part)."""
    q = quat_normalize(q)
    if abs(q[0]) < 1e-12:
        # half turn: the sign of the first nonzero vector component decides
        nz = np.flatnonzero(q[1:])
        if nz.size and q[1 + nz[0]] < 0.0:
            return -q
        return q
    return -q if q[0] < 0.0 else q


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_rotmat(q) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return quat_canonical(q)


def so3_exp(omega) -> np.ndarray:
    """Rotation vector (rad) to unit quaternion."""
    omega = np.asarray(omega, dtype=float)
    theta = np.sqrt(omega @ omega)
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        q = np.concatenate(([1.0 - t2 / 8.0], 0.5 * omega * (1.0 - t2 / 24.0)))
        return q / np.linalg.norm(q)
    return np.concatenate(([np.cos(0.5 * theta)], np.sin(0.5 * theta) / theta * omega))


def so3_log(q) -> np.ndarray:
    """Unit quaternion to rotation vector with angle in [0, pi].

    A half turn has two valid axes; the canonical quaternion sign decides.
    """
    q = quat_canonical(q)
    v = q[1:]
    n = np.sqrt(v @ v)
    if n < 1e-9:
        return 2.0 * v / q[0]
    return (2.0 * np.arctan2(n, q[0]) / n) * v


def quat_rotate(q, v) -> np.ndarray:
    return quat_to_rotmat(q) @ np.asarray(v, dtype=float)


def quat_slerp(q0, q1, alpha: float) -> np.ndarray:
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    if q0 @ q1 < 0.0:
        q1 = -q1
    delta = so3_log(quat_mul(quat_conj(q0), q1))
    return quat_mul(q0, so3_exp(alpha * delta))


def quat_angle(q0, q1) -> float:
    """Geodesic angle (rad) between two orientations."""
    return float(np.linalg.norm(so3_log(quat_mul(quat_conj(q0), q1))))


def rotmat_angle(R) -> float:
    # atan2 form keeps full precision near the identity, where arccos does not
    s = 0.5 * math.hypot(R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1])
    return math.atan2(s, 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0))


def yaw_rotmat(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rpy_rotmat(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Z-Y-X intrinsic Euler angles (yaw about world z last)."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    return yaw_rotmat(yaw) @ Ry @ Rx


def rotmat_yaw(R) -> float:
    return float(np.arctan2(R[1, 0], R[0, 0]))


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


# --------------------------------------------------------------------------
# rigid transforms
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose3:
    """Rigid transform ``T_a<-b``: maps points from frame ``b`` into frame ``a``.

    ``frames`` is an optional ``(a, b)`` tag pair checked on composition when
    Python runs without ``-O``.
    """

    q: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    frames: tuple[FrameTag, FrameTag] | None = None

    def __post_init__(self):
        object.__setattr__(self, "q", quat_canonical(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls, frames=None) -> "Pose3":
        return cls(frames=frames)

    @classmethod
    def from_rt(cls, R, t, frames=None) -> "Pose3":
        pose = cls(rotmat_to_quat(R), t, frames)
        # keep the exact matrix to avoid a quaternion round trip in hot loops
        pose.__dict__["R"] = np.asarray(R, dtype=float)
        return pose

    @classmethod
    def from_matrix(cls, T, frames=None) -> "Pose3":
        T = np.asarray(T, dtype=float)
        return cls.from_rt(T[:3, :3], T[:3, 3], frames)

    @cached_property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Pose3":
        Rt = self.R.T
        frames = None if self.frames is None else (self.frames[1], self.frames[0])
        return Pose3.from_rt(Rt, -Rt @ self.t, frames)

    def compose(self, other: "Pose3") -> "Pose3":
        frames = None
        if self.frames is not None and other.frames is not None:
            if __debug__ and self.frames[1] is not other.frames[0]:
                raise FrameMismatch(f"cannot chain {self.frames} with {other.frames}")
            frames = (self.frames[0], other.frames[1])
        return Pose3.from_rt(self.R @ other.R, self.R @ other.t + self.t, frames)

    __matmul__ = compose

    def transform_point(self, p, frame: FrameTag | None = None) -> np.ndarray:
        """``R p + t``; accepts a single point or an (N, 3) array."""
        if __debug__ and frame is not None and self.frames is not None and frame is not self.frames[1]:
            raise FrameMismatch(f"point in {frame} but transform expects {self.frames[1]}")
        p = np.asarray(p, dtype=float)
        return p @ self.R.T + self.t

    def retract(self, dp, dtheta) -> "Pose3":
        """Additive position update, right-multiplicative rotation update."""
        return Pose3.from_rt(self.R @ exp_rotmat(dtheta), self.t + dp, self.frames)

    def almost_equal(self, other: "Pose3", tol: float = 1e-9) -> bool:
        return (np.allclose(self.t, other.t, atol=tol)
                and rotmat_angle(self.R.T @ other.R) < tol)

    def __repr__(self):
        return f"Pose3(q={np.round(self.q, 6).tolist()}, t={np.round(self.t, 6).tolist()})"


def transform_point(T: Pose3, p, frame: FrameTag | None = None) -> np.ndarray:
    return T.transform_point(p, frame)


def relative_pose(Ti: Pose3, Tj: Pose3) -> Pose3:
    """``Ti^-1 Tj``."""
    return Ti.inverse() @ Tj
