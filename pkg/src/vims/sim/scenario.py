"""Scenario configuration and dataset generation."""

from __future__ import annotations

import dataclasses
import heapq
from dataclasses import dataclass, field

import numpy as np

from vims.geometry import Pose3, WorldConstants, rotmat_to_quat
from vims.measurements import FrameObservation, ImuStream, MagStream, SonarStream
from vims.sim import sensors
from vims.sim.coil import CoilSpec
from vims.sim.trajectory import (Oscillation, Path, SpeedProfile, Trajectory, cruise_segments,
                                 lawnmower_segments, out_and_back_segments)
from vims.sim.world import (CameraModel, SeafloorModel, SensorNoiseSpec, World, generate_landmarks)

FAMILIES = ("lawnmower", "reversed_revisit", "cruise")

# seed-sequence spawn keys; one independent stream per consumer
STREAMS = {"landmarks": 0, "imu": 1, "mag": 2, "sonar": 3, "camera": 4, "descriptors": 5}


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    """Every scenario knob, flat so it round-trips through a key = value file."""

    family: str = "lawnmower"
    # motion
    speed: float = 0.3
    initial_speed: float = 0.0
    ramp_time: float = 10.0
    max_speed: float = 0.38
    altitude: float = 2.0
    start_x: float = 0.0
    start_y: float = 0.0
    start_heading: float = 0.0
    duration: float = 0.0  # 0 = until the end of the path
    lane_length: float = 8.0
    lane_spacing: float = 2.5
    lanes: int = 3
    line_length: float = 14.0
    cruise_length: float = 30.0
    cruise_radius: float = 8.0
    keyhole_small_radius: float = 1.0
    keyhole_big_radius: float = 1.5
    heave_amplitude: float = 0.15
    heave_period: float = 40.0
    roll_amplitude: float = 0.03
    roll_period: float = 17.0
    pitch_amplitude: float = 0.03
    pitch_period: float = 23.0
    # seafloor and landmarks
    floor_z: float = 0.0
    roughness: float = 0.01
    landmark_density: float = 5.0
    landmark_margin: float = 3.0
    sparse_regions: int = 2
    sparse_radius: float = 2.0
    sparse_depth: float = 0.85
    aliasing_patches: int = 0
    patch_radius: float = 1.0
    # coil; nan = family default placement
    coil_x: float = float("nan")
    coil_y: float = float("nan")
    coil_radius: float = 0.3
    coil_turns: int = 330
    coil_current: float = 2.0
    drive_frequency: float = 50.0
    # world constants
    gravity: float = 9.81
    geomag_e: float = 0.0
    geomag_n: float = 30.0
    geomag_u: float = -40.0
    # sensor rates
    imu_rate: float = 200.0
    mag_rate: float = 1000.0
    sonar_rate: float = 10.0
    camera_rate: float = 20.0
    # noise
    gyro_noise_density: float = 1.7e-4
    gyro_bias_walk: float = 2.0e-5
    accel_noise_density: float = 2.0e-3
    accel_bias_walk: float = 1.0e-4
    gyro_bias_init: float = 2.0e-3
    accel_bias_init: float = 2.0e-2
    mag_noise_sigma: float = 0.05
    sonar_range_sigma: float = 0.02
    sonar_multipath_prob: float = 0.1
    sonar_multipath_scale: float = 2.5
    pixel_noise_sigma: float = 0.003
    # camera
    fx: float = 460.0
    fy: float = 460.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    max_range: float = 8.0
    attenuation_start: float = 5.0
    detection_floor: float = 0.2

    @classmethod
    def for_family(cls, family: str, **overrides) -> "ScenarioConfig":
        base: dict = {"family": family}
        if family == "cruise":
            # already under way, gentle curves: max acceleration well under 0.05 m/s^2
            base.update(speed=0.25, initial_speed=0.25, ramp_time=0.0, cruise_length=30.0,
                        cruise_radius=8.0, sparse_regions=0)
        elif family == "reversed_revisit":
            base.update(line_length=14.0, sparse_regions=1)
        elif family == "lawnmower":
            base.update(aliasing_patches=2)
        base.update(overrides)
        cfg = cls(**base)
        cfg.validate()
        return cfg

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown scenario family {self.family!r}")
        if not 0.0 < self.speed <= self.max_speed:
            raise ConfigError(f"speed {self.speed} outside (0, {self.max_speed}]")
        if not 0.0 <= self.initial_speed <= self.max_speed:
            raise ConfigError("initial_speed outside [0, max_speed]")
        if self.altitude <= 0.5:
            raise ConfigError("altitude must exceed 0.5 m")
        for name in ("imu_rate", "mag_rate", "sonar_rate", "camera_rate"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.drive_frequency < self.mag_rate / 2.0:
            raise ConfigError("drive frequency must lie below the magnetometer Nyquist rate")
        if self.imu_rate % self.camera_rate != 0.0:
            raise ConfigError("camera_rate must divide imu_rate so frames land on IMU samples")
        if self.lanes < 1 or self.coil_turns < 1:
            raise ConfigError("lanes and coil_turns must be >= 1")
        try:
            self.noise_spec()
            CoilSpec(radius=self.coil_radius, turns=self.coil_turns)
            SeafloorModel(self.floor_z, self.roughness)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def noise_spec(self) -> SensorNoiseSpec:
        names = SensorNoiseSpec.__dataclass_fields__
        return SensorNoiseSpec(**{k: getattr(self, k) for k in names})

    def camera_model(self) -> CameraModel:
        names = CameraModel.__dataclass_fields__
        return CameraModel(**{k: getattr(self, k) for k in names if hasattr(self, k)})

    def constants(self) -> WorldConstants:
        return WorldConstants(np.array([0.0, 0.0, -self.gravity]),
                              np.array([self.geomag_e, self.geomag_n, self.geomag_u]))

    def path(self) -> Path:
        keyhole = (self.keyhole_small_radius, self.keyhole_big_radius)
        if self.family == "lawnmower":
            segs = lawnmower_segments(self.lane_length, self.lane_spacing, self.lanes, keyhole)
        elif self.family == "reversed_revisit":
            segs = out_and_back_segments(self.line_length, keyhole)
        else:
            segs = cruise_segments(self.cruise_length, self.cruise_radius)
        return Path([self.start_x, self.start_y], self.start_heading, segs)

    def trajectory(self) -> Trajectory:
        return Trajectory(
            self.path(),
            SpeedProfile(self.initial_speed, self.speed, self.ramp_time),
            self.altitude, self.floor_z,
            heave=Oscillation(self.heave_amplitude, self.heave_period),
            roll=Oscillation(self.roll_amplitude, self.roll_period, 0.3),
            pitch=Oscillation(self.pitch_amplitude, self.pitch_period, 1.1),
        )

    def coil_position(self) -> np.ndarray:
        if np.isfinite(self.coil_x) and np.isfinite(self.coil_y):
            local = np.array([self.coil_x, self.coil_y])
            absolute = True
        else:
            absolute = False
            if self.family == "lawnmower":
                local = np.array([0.5 * self.lane_length + 0.5, 0.5 * (self.lanes - 1) * self.lane_spacing + 0.7])
            elif self.family == "reversed_revisit":
                local = np.array([0.5 * self.line_length, 1.2])
            else:
                local = np.array([2.0, 3.0])
        if not absolute:
            c, s = np.cos(self.start_heading), np.sin(self.start_heading)
            local = np.array([c * local[0] - s * local[1], s * local[0] + c * local[1]])
            local = local + [self.start_x, self.start_y]
        return np.array([local[0], local[1], self.floor_z + 0.1])

    def coil(self) -> CoilSpec:
        return CoilSpec(center=self.coil_position(), radius=self.coil_radius, turns=self.coil_turns,
                        current_amplitude=self.coil_current, drive_frequency=self.drive_frequency)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        fields_ = cls.__dataclass_fields__
        unknown = set(d) - set(fields_)
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in d.items():
            typ = fields_[k].type
            try:
                kwargs[k] = int(v) if typ == "int" else (str(v) if typ == "str" else float(v))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {k}: {v!r}") from exc
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class GroundTruth:
    t: np.ndarray
    position: np.ndarray
    quat: np.ndarray  # (N, 4) w, x, y, z; world <- body
    velocity: np.ndarray

    def __len__(self):
        return len(self.t)

    def pose(self, i: int) -> Pose3:
        return Pose3(self.quat[i], self.position[i])

    def index_at(self, t: float, tol: float = 0.05) -> int:
        i = int(np.clip(np.searchsorted(self.t, t), 1, len(self.t) - 1))
        if abs(self.t[i - 1] - t) <= abs(self.t[i] - t):
            i -= 1
        if abs(self.t[i] - t) > tol:
            raise KeyError(f"no ground truth within {tol} s of {t}")
        return i


@dataclass
class ScenarioDataset:
    config: ScenarioConfig
    seed: int
    world: World
    imu: ImuStream
    mag: MagStream
    sonar: SonarStream
    frames: list[FrameObservation]
    ground_truth: GroundTruth
    truth: dict = field(default_factory=dict)  # simulator-only extras (biases, multipath flags)

    @property
    def noise(self) -> SensorNoiseSpec:
        return self.config.noise_spec()

    def trajectory(self) -> Trajectory:
        return self.config.trajectory()

    def events(self):
        """All samples merged into one time-ordered stream of ``(t, kind, sample)``."""
        def stream(kind, order, n, get, times):
            for i in range(n):
                yield (float(times[i]), order, i, kind, get)

        sources = [
            stream("imu", 0, len(self.imu), self.imu.sample, self.imu.t),
            stream("mag", 1, len(self.mag), self.mag.sample, self.mag.t),
            stream("sonar", 2, len(self.sonar), self.sonar.sample, self.sonar.t),
            stream("frame", 3, len(self.frames), self.frames.__getitem__, [f.t for f in self.frames]),
        ]
        for t, _, i, kind, get in heapq.merge(*sources):
            yield t, kind, get(i)


def _grid(duration: float, rate: float) -> np.ndarray:
    n = int(np.floor(duration * rate + 1e-9)) + 1
    return np.arange(n) / rate


def stream_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[name],)))


def build_world(config: ScenarioConfig, seed: int) -> World:
    traj = config.trajectory()
    xy = traj.evaluate(np.linspace(0.0, traj.duration, 2000)).position[:, :2]
    m = config.landmark_margin
    bounds = (xy[:, 0].min() - m, xy[:, 0].max() + m, xy[:, 1].min() - m, xy[:, 1].max() + m)
    seafloor = SeafloorModel(config.floor_z, config.roughness)
    landmarks = generate_landmarks(
        stream_rng(seed, "landmarks"), bounds, seafloor, config.landmark_density,
        config.sparse_regions, config.sparse_radius, config.sparse_depth,
        config.aliasing_patches, config.patch_radius)
    return World(config.coil(), seafloor, landmarks, config.constants(), config.camera_model())


def generate_scenario(config: ScenarioConfig, seed: int) -> ScenarioDataset:
    """Deterministic synthetic dataset for ``config`` and ``seed``."""
    config.validate()
    traj = config.trajectory()
    duration = traj.duration if config.duration <= 0.0 else min(config.duration, traj.duration)
    world = build_world(config, seed)
    noise = config.noise_spec()

    t_imu = _grid(duration, config.imu_rate)
    st = traj.evaluate(t_imu)
    acc, gyro, ba, bg = sensors.imu_batch(st, world.constants.gravity, noise, config.imu_rate,
                                          stream_rng(seed, "imu"))
    imu = ImuStream(t_imu, acc, gyro)

    t_mag = _grid(duration, config.mag_rate)
    sm = traj.evaluate(t_mag)
    mag = MagStream(t_mag, sensors.magnetometer_batch(world, sm.position, sm.rotation, t_mag, noise,
                                                       stream_rng(seed, "mag")))
    del sm

    t_sonar = _grid(duration, config.sonar_rate)
    ss = traj.evaluate(t_sonar)
    ranges, multipath = sensors.sonar_batch(world, ss.position, ss.rotation, noise, stream_rng(seed, "sonar"))
    sonar = SonarStream(t_sonar, ranges)

    t_cam = _grid(duration, config.camera_rate)
    sc = traj.evaluate(t_cam)
    cam_rng = stream_rng(seed, "camera")
    frames = []
    quats = np.empty((len(t_cam), 4))
    for i, t in enumerate(t_cam):
        pose = Pose3.from_rt(sc.rotation[i], sc.position[i])
        quats[i] = pose.q
        frames.append(sensors.sample_frame(world, pose, world.camera, noise, cam_rng, float(t)))
    gt = GroundTruth(t_cam, sc.position, quats, sc.velocity)

    truth = {"accel_bias": ba, "gyro_bias": bg, "sonar_multipath": multipath}
    return ScenarioDataset(config, int(seed), world, imu, mag, sonar, frames, gt, truth)


def quat_array(rotations) -> np.ndarray:
    return np.array([rotmat_to_quat(R) for R in rotations])
