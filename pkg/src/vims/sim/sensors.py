"""Sensor models. Each ``sample_*`` function has a vectorised ``*_batch`` twin
used by the scenario generator; the single-sample versions are the reference."""

from __future__ import annotations

import numpy as np

from vims.geometry import Pose3
from vims.measurements import FrameObservation, MagSample, SonarSample
from vims.sim.coil import coil_field
from vims.sim.world import CameraModel, SensorNoiseSpec, World

TESLA_TO_MICROTESLA = 1e6


class NoSonarIntersection(ValueError):
    """The sonar beam does not hit the seafloor plane."""


# --------------------------------------------------------------------------
# magnetometer
# --------------------------------------------------------------------------

def magnetometer_truth(world: World, position, rotation, t) -> np.ndarray:
    """Noise-free body-frame reading(s) in microtesla.

    ``rotation`` is world<-body, (3, 3) or (N, 3, 3).
    """
    position = np.asarray(position, dtype=float)
    t = np.asarray(t, dtype=float)
    h = coil_field(world.coil, position) * TESLA_TO_MICROTESLA
    drive = np.sin(2.0 * np.pi * world.coil.drive_frequency * t)
    total = world.constants.geomagnetic_field_world + h * np.asarray(drive)[..., None]
    # R^T applied row-wise
    return np.einsum("...ji,...j->...i", rotation, total)


def sample_magnetometer(world: World, pose_truth: Pose3, t: float, noise: SensorNoiseSpec,
                        rng: np.random.Generator) -> MagSample:
    b = magnetometer_truth(world, pose_truth.t, pose_truth.R, t)
    if noise.mag_noise_sigma > 0.0:
        b = b + rng.normal(0.0, noise.mag_noise_sigma, 3)
    return MagSample(float(t), b)


def magnetometer_batch(world, positions, rotations, t, noise: SensorNoiseSpec, rng) -> np.ndarray:
    b = magnetometer_truth(world, positions, rotations, t)
    return b + rng.normal(0.0, noise.mag_noise_sigma, b.shape)


# --------------------------------------------------------------------------
# sonar
# --------------------------------------------------------------------------

def sonar_ray(world: World, position, rotation):
    """Beam origin and unit direction in the world frame (batched)."""
    Tbs = world.extrinsics.body_from_sonar
    origin = position + np.einsum("...ij,j->...i", rotation, Tbs.t)
    direction = np.einsum("...ij,j->...i", rotation, Tbs.R[:, 2])
    return origin, direction


def sonar_truth_range(world: World, position, rotation) -> np.ndarray:
    origin, direction = sonar_ray(world, position, rotation)
    dz = direction[..., 2]
    if np.any(dz > -1e-9):
        raise NoSonarIntersection("sonar beam points away from the seafloor")
    rng_ = (world.seafloor.plane_height - origin[..., 2]) / dz
    if np.any(rng_ <= 0.0):
        raise NoSonarIntersection("seafloor is behind the sonar")
    return rng_


def _corrupt_sonar(r, noise: SensorNoiseSpec, rng):
    r = np.asarray(r, dtype=float)
    r = r + rng.normal(0.0, noise.sonar_range_sigma, r.shape)
    multipath = rng.random(r.shape) < noise.sonar_multipath_prob
    r = np.where(multipath, r * noise.sonar_multipath_scale, r)
    return np.maximum(r, 1e-3), multipath


def sample_sonar(world: World, pose_truth: Pose3, noise: SensorNoiseSpec, rng, t: float = 0.0) -> SonarSample:
    r = sonar_truth_range(world, pose_truth.t, pose_truth.R)
    r, _ = _corrupt_sonar(r, noise, rng)
    return SonarSample(float(t), float(r))


def sonar_batch(world, positions, rotations, noise, rng):
    """Returns (ranges, multipath flags)."""
    return _corrupt_sonar(sonar_truth_range(world, positions, rotations), noise, rng)


# --------------------------------------------------------------------------
# camera
# --------------------------------------------------------------------------

def camera_pose(world: World, pose_truth: Pose3) -> Pose3:
    """world <- camera."""
    return pose_truth @ world.extrinsics.body_from_camera


def project_landmarks(world: World, pose_truth: Pose3, camera: CameraModel | None = None):
    """Noise-free projection of every landmark passing the visibility tests.

    Returns (rows, uv, distance, effective_saliency, in_plane_rotation).
    """
    camera = camera or world.camera
    lm = world.landmarks
    Twc = camera_pose(world, pose_truth)
    Rcw = Twc.R.T
    # cheap prefilter on horizontal distance
    near = np.sum((lm.positions[:, :2] - Twc.t[:2]) ** 2, axis=1) <= camera.max_range ** 2
    rows = np.flatnonzero(near)
    pc = (lm.positions[rows] - Twc.t) @ Rcw.T
    z = pc[:, 2]
    dist = np.linalg.norm(pc, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = pc[:, 0] / z
        v = pc[:, 1] / z
    umin, umax, vmin, vmax = camera.bounds
    eff = lm.saliency[rows] * camera.attenuation(dist)
    ok = ((z > 0.05) & (u >= umin) & (u <= umax) & (v >= vmin) & (v <= vmax)
          & (dist <= camera.max_range) & (eff >= camera.detection_floor))
    rows, u, v, dist, eff = rows[ok], u[ok], v[ok], dist[ok], eff[ok]
    # in-plane angle of the camera x axis projected on the floor, relative to the landmark
    xw = Twc.R[:, 0]
    image_angle = np.arctan2(xw[1], xw[0])
    rot = (image_angle - lm.orientation[rows] + np.pi) % (2 * np.pi) - np.pi
    return rows, np.column_stack([u, v]), dist, eff, rot


def sample_frame(world: World, pose_truth: Pose3, camera: CameraModel | None, noise: SensorNoiseSpec,
                 rng: np.random.Generator, t: float = 0.0) -> FrameObservation:
    camera = camera or world.camera
    rows, uv, dist, eff, rot = project_landmarks(world, pose_truth, camera)
    uv = uv + rng.normal(0.0, noise.pixel_noise_sigma, uv.shape)
    return FrameObservation(float(t), world.landmarks.ids[rows].copy(), uv, rot,
                            dist / camera.reference_distance, eff)


# --------------------------------------------------------------------------
# IMU
# --------------------------------------------------------------------------

def imu_batch(state, gravity, noise: SensorNoiseSpec, rate: float, rng: np.random.Generator):
    """Specific force and angular rate with white noise and random-walk biases.

    Returns (acc, gyro, accel_bias, gyro_bias), each (N, 3).
    """
    n = len(state.t)
    dt = 1.0 / rate
    f_world = state.acceleration - gravity
    acc = np.einsum("nji,nj->ni", state.rotation, f_world)
    gyro = state.omega_body.copy()

    ba0 = rng.normal(0.0, noise.accel_bias_init, 3)
    bg0 = rng.normal(0.0, noise.gyro_bias_init, 3)
    walk_a = rng.normal(0.0, noise.accel_bias_walk * np.sqrt(dt), (n, 3))
    walk_g = rng.normal(0.0, noise.gyro_bias_walk * np.sqrt(dt), (n, 3))
    walk_a[0] = 0.0
    walk_g[0] = 0.0
    ba = ba0 + np.cumsum(walk_a, axis=0)
    bg = bg0 + np.cumsum(walk_g, axis=0)
    white_a = rng.normal(0.0, noise.accel_noise_density * np.sqrt(rate), (n, 3))
    white_g = rng.normal(0.0, noise.gyro_noise_density * np.sqrt(rate), (n, 3))
    return acc + ba + white_a, gyro + bg + white_g, ba, bg
