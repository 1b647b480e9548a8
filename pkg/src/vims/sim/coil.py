"""Magnetic field of the alternating-field coil.

The coil is treated as one circular loop carrying ``turns * current`` at its
mid-height. The off-axis field uses complete elliptic integrals (Simpson et
al., "Simple analytic expressions for the magnetic field of a circular
current loop").
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ellipe, ellipk

MU0 = 4e-7 * np.pi
WIRE_CLEARANCE = 0.01  # m


class SingularFieldPoint(ValueError):
    """Raised when a field point lies on (or within 1 cm of) the coil wire."""


@dataclass(frozen=True)
class CoilSpec:
    center: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.1]))
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    radius: float = 0.3
    turns: int = 330
    current_amplitude: float = 2.0  # A
    drive_frequency: float = 50.0  # Hz

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float)
        n = np.linalg.norm(axis)
        if n == 0.0:
            raise ValueError("coil axis must be nonzero")
        object.__setattr__(self, "axis", axis / n)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.radius <= 0.0:
            raise ValueError("coil radius must be positive")
        if self.turns < 1:
            raise ValueError("coil needs at least one turn")
        if self.drive_frequency <= 0.0:
            raise ValueError("drive frequency must be positive")

    @property
    def ampere_turns(self) -> float:
        return self.turns * self.current_amplitude

    @property
    def dipole_moment(self) -> np.ndarray:
        return self.ampere_turns * np.pi * self.radius ** 2 * self.axis


def _loop_field_cyl(a: float, current: float, rho, z):
    """(B_rho, B_z) in tesla of a loop of radius ``a`` in the z=0 plane."""
    rho = np.asarray(rho, dtype=float)
    z = np.asarray(z, dtype=float)
    r2 = rho * rho + z * z
    alpha2 = a * a + r2 - 2.0 * a * rho
    beta2 = a * a + r2 + 2.0 * a * rho
    beta = np.sqrt(beta2)
    m = 1.0 - alpha2 / beta2
    K = ellipk(m)
    E = ellipe(m)
    C = MU0 * current / np.pi

    bz = C / (2.0 * alpha2 * beta) * ((a * a - r2) * E + alpha2 * K)

    near_axis = rho < 1e-6 * a
    safe_rho = np.where(near_axis, 1.0, rho)
    brho = C * z / (2.0 * alpha2 * beta * safe_rho) * ((a * a + r2) * E - alpha2 * K)
    # leading-order expansion avoids cancellation next to the axis
    brho_axis = 3.0 * MU0 * current * a * a * z * rho / (4.0 * (a * a + z * z) ** 2.5)
    brho = np.where(near_axis, brho_axis, brho)
    return brho, bz


def coil_field(coil: CoilSpec, p) -> np.ndarray:
    """Amplitude of the alternating field (tesla, world frame) at ``p``.

    ``p`` may be a single point or an (N, 3) array.
    """
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    d = pts - coil.center
    z = d @ coil.axis
    radial = d - z[:, None] * coil.axis
    rho = np.linalg.norm(radial, axis=1)
    if np.any(np.hypot(rho - coil.radius, z) < WIRE_CLEARANCE):
        raise SingularFieldPoint("field point within 1 cm of the coil wire")
    brho, bz = _loop_field_cyl(coil.radius, coil.ampere_turns, rho, z)
    with np.errstate(invalid="ignore", divide="ignore"):
        rhat = np.where(rho[:, None] > 0.0, radial / rho[:, None], 0.0)
    B = brho[:, None] * rhat + bz[:, None] * coil.axis
    return B[0] if single else B


def dipole_field(coil: CoilSpec, p) -> np.ndarray:
    """Far-field dipole approximation, used as an independent check."""
    p = np.asarray(p, dtype=float)
    r = p - coil.center
    rn = np.linalg.norm(r, axis=-1, keepdims=True)
    rhat = r / rn
    m = coil.dipole_moment
    mr = np.sum(rhat * m, axis=-1, keepdims=True)
    return MU0 / (4.0 * np.pi) * (3.0 * mr * rhat - m) / rn ** 3


def on_axis_field(coil: CoilSpec, z: float) -> float:
    """Closed-form axial field at signed distance ``z`` along the axis."""
    a = coil.radius
    return MU0 * coil.ampere_turns * a * a / (2.0 * (a * a + z * z) ** 1.5)
