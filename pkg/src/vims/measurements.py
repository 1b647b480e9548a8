"""Sensor sample types shared by the simulator and the estimators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ImuSample:
    t: float
    acc: np.ndarray  # specific force, body frame, m/s^2
    gyro: np.ndarray  # rad/s


@dataclass(frozen=True)
class MagSample:
    t: float
    field_body: np.ndarray  # microtesla


@dataclass(frozen=True)
class SonarSample:
    t: float
    range: float  # m

    def __post_init__(self):
        if not self.range > 0.0:
            raise ValueError("sonar range must be positive")


@dataclass(frozen=True)
class FrameObservation:
    """Landmarks seen in one camera frame.

    ``uv`` are normalized image-plane coordinates. ``rotation`` and ``scale``
    describe how each landmark's patch appears in the image (in-plane angle
    relative to the landmark's canonical orientation, and distance relative
    to the reference distance); ``response`` is the corner strength. They
    stand in for the pixels a descriptor extractor would look at.
    """

    t: float
    ids: np.ndarray
    uv: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(0))
    scale: np.ndarray = field(default_factory=lambda: np.zeros(0))
    response: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.ids)


@dataclass
class ImuStream:
    t: np.ndarray
    acc: np.ndarray
    gyro: np.ndarray

    def __len__(self):
        return len(self.t)

    def sample(self, i: int) -> ImuSample:
        return ImuSample(float(self.t[i]), self.acc[i], self.gyro[i])

    def slice(self, t0: float, t1: float) -> "ImuStream":
        """Samples with ``t0 <= t <= t1``."""
        i0 = np.searchsorted(self.t, t0 - 1e-9, side="left")
        i1 = np.searchsorted(self.t, t1 + 1e-9, side="right")
        return ImuStream(self.t[i0:i1], self.acc[i0:i1], self.gyro[i0:i1])


@dataclass
class MagStream:
    t: np.ndarray
    field: np.ndarray

    def __len__(self):
        return len(self.t)

    def sample(self, i: int) -> MagSample:
        return MagSample(float(self.t[i]), self.field[i])


@dataclass
class SonarStream:
    t: np.ndarray
    range: np.ndarray

    def __len__(self):
        return len(self.t)

    def sample(self, i: int) -> SonarSample:
        return SonarSample(float(self.t[i]), float(self.range[i]))
