"""Static contents of the simulated underwater world."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vims.geometry import FrameTag, Pose3, WorldConstants
from vims.sim.coil import CoilSpec

DESCRIPTOR_BYTES = 32  # 256-bit binary descriptors


@dataclass(frozen=True)
class SeafloorModel:
    plane_height: float = 0.0
    roughness_sigma: float = 0.01

    def __post_init__(self):
        if self.roughness_sigma < 0.0:
            raise ValueError("roughness_sigma must be >= 0")


@dataclass(frozen=True)
class Landmark:
    id: int
    position: np.ndarray
    saliency: float
    true_descriptor: np.ndarray  # (32,) uint8
    canonical_orientation: float
    pattern_seed: int


@dataclass
class LandmarkField:
    """Column-oriented landmark table. Row ``i`` has id ``ids[i]``."""

    ids: np.ndarray
    positions: np.ndarray
    saliency: np.ndarray
    descriptors: np.ndarray
    orientation: np.ndarray
    pattern_seed: np.ndarray

    def __post_init__(self):
        self._index = {int(i): k for k, i in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def __contains__(self, landmark_id) -> bool:
        return int(landmark_id) in self._index

    def rows(self, ids) -> np.ndarray:
        return np.array([self._index[int(i)] for i in ids], dtype=int)

    def __getitem__(self, landmark_id) -> Landmark:
        k = self._index[int(landmark_id)]
        return Landmark(int(self.ids[k]), self.positions[k], float(self.saliency[k]),
                        self.descriptors[k], float(self.orientation[k]), int(self.pattern_seed[k]))


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera; all image measurements are on the normalized plane."""

    fx: float = 460.0
    fy: float = 460.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    max_range: float = 8.0
    attenuation_start: float = 5.0
    detection_floor: float = 0.2
    reference_distance: float = 2.0

    @property
    def bounds(self):
        """(u_min, u_max, v_min, v_max) on the normalized plane."""
        return (-self.cx / self.fx, (self.width - self.cx) / self.fx,
                -self.cy / self.fy, (self.height - self.cy) / self.fy)

    def attenuation(self, distance):
        """Light attenuation factor applied to saliency."""
        d = np.asarray(distance, dtype=float)
        span = self.max_range - self.attenuation_start
        return np.clip((self.max_range - d) / span, 0.0, 1.0)


def _downward_camera() -> Pose3:
    # camera z looks down (-z body), image up (-y cam) points forward (+x body)
    R = np.array([[0.0, -1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, -1.0]])
    return Pose3.from_rt(R, [0.10, 0.0, -0.05], frames=(FrameTag.BODY, FrameTag.CAMERA))


def _downward_sonar() -> Pose3:
    R = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    return Pose3.from_rt(R, [-0.10, 0.0, -0.05], frames=(FrameTag.BODY, FrameTag.SONAR))


@dataclass(frozen=True)
class Extrinsics:
    body_from_camera: Pose3 = field(default_factory=_downward_camera)
    body_from_sonar: Pose3 = field(default_factory=_downward_sonar)


@dataclass(frozen=True)
class SensorNoiseSpec:
    gyro_noise_density: float = 1.7e-4  # rad/s/sqrt(Hz)
    gyro_bias_walk: float = 2.0e-5  # rad/s^2/sqrt(Hz)
    accel_noise_density: float = 2.0e-3  # m/s^2/sqrt(Hz)
    accel_bias_walk: float = 1.0e-4  # m/s^3/sqrt(Hz)
    gyro_bias_init: float = 2.0e-3  # rad/s, per-axis sigma of the initial bias
    accel_bias_init: float = 2.0e-2  # m/s^2
    mag_noise_sigma: float = 0.05  # microtesla
    sonar_range_sigma: float = 0.02  # m
    sonar_multipath_prob: float = 0.1
    sonar_multipath_scale: float = 2.5
    pixel_noise_sigma: float = 0.003  # normalized image plane

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0.0:
                raise ValueError(f"{name} must be >= 0")
        if self.sonar_multipath_prob >= 0.5:
            raise ValueError("sonar_multipath_prob must be < 0.5")

    @classmethod
    def noiseless(cls) -> "SensorNoiseSpec":
        return cls(**{k: 0.0 for k in cls.__dataclass_fields__})


@dataclass
class World:
    coil: CoilSpec
    seafloor: SeafloorModel
    landmarks: LandmarkField
    constants: WorldConstants = field(default_factory=WorldConstants)
    camera: CameraModel = field(default_factory=CameraModel)
    extrinsics: Extrinsics = field(default_factory=Extrinsics)


# --------------------------------------------------------------------------
# landmark generation
# --------------------------------------------------------------------------

def generate_landmarks(rng: np.random.Generator, bounds, seafloor: SeafloorModel, density: float,
                       sparse_regions: int = 0, sparse_radius: float = 2.0, sparse_depth: float = 0.85,
                       aliasing_patches: int = 0, patch_radius: float = 0.8,
                       patch_min_separation: float = 6.0) -> LandmarkField:
    """Scatter landmarks on the floor plane.

    Density dips inside ``sparse_regions`` Gaussian blobs (feature-poor
    floor). ``aliasing_patches`` copies a disc of landmarks, descriptors and
    layout included, to a distant location to create perceptual aliasing.
    """
    xmin, xmax, ymin, ymax = bounds
    area = (xmax - xmin) * (ymax - ymin)
    n = rng.poisson(density * area)
    xy = np.column_stack([rng.uniform(xmin, xmax, n), rng.uniform(ymin, ymax, n)])

    centers = np.column_stack([rng.uniform(xmin, xmax, sparse_regions),
                               rng.uniform(ymin, ymax, sparse_regions)])
    keep_prob = np.ones(n)
    for c in centers:
        d2 = np.sum((xy - c) ** 2, axis=1)
        keep_prob *= 1.0 - sparse_depth * np.exp(-0.5 * d2 / sparse_radius ** 2)
    xy = xy[rng.random(n) < keep_prob]
    n = len(xy)

    z = seafloor.plane_height + np.clip(rng.normal(0.0, 1.0, n), -4.0, 4.0) * seafloor.roughness_sigma
    positions = np.column_stack([xy, z])
    saliency = rng.random(n)
    descriptors = rng.integers(0, 256, size=(n, DESCRIPTOR_BYTES), dtype=np.uint8)
    orientation = rng.uniform(-np.pi, np.pi, n)
    pattern_seed = rng.integers(0, 2 ** 31 - 1, size=n)

    for _ in range(aliasing_patches):
        for _attempt in range(100):
            src = np.array([rng.uniform(xmin, xmax), rng.uniform(ymin, ymax)])
            dst = np.array([rng.uniform(xmin, xmax), rng.uniform(ymin, ymax)])
            if np.linalg.norm(src - dst) >= patch_min_separation:
                break
        else:
            continue
        in_src = np.linalg.norm(positions[:, :2] - src, axis=1) <= patch_radius
        in_dst = np.linalg.norm(positions[:, :2] - dst, axis=1) <= patch_radius
        keep = ~in_dst | in_src
        copy = in_src.copy()
        shift = np.concatenate([dst - src, [0.0]])
        positions = np.concatenate([positions[keep], positions[copy] + shift])
        saliency = np.concatenate([saliency[keep], saliency[copy]])
        descriptors = np.concatenate([descriptors[keep], descriptors[copy]])
        orientation = np.concatenate([orientation[keep], orientation[copy]])
        pattern_seed = np.concatenate([pattern_seed[keep], pattern_seed[copy]])

    ids = np.arange(len(positions), dtype=np.int64)
    return LandmarkField(ids, positions, saliency, descriptors, orientation, pattern_seed)
