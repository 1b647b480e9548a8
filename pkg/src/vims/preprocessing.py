"""Measurement preprocessing: sonar median filter, magnetic field separation and
signature extraction, IMU preintegration."""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from vims.geometry import exp_rotmat, log_rotmat, quat_to_rotmat, right_jacobian, rotmat_to_quat, skew
from vims.measurements import ImuStream, MagStream, SonarSample, SonarStream
from vims.sim.world import SensorNoiseSpec

# --------------------------------------------------------------------------
# sonar
# --------------------------------------------------------------------------


def median_filter_sonar(window: list[SonarSample], half_width: int | None = None) -> SonarSample:
    """Median of a window of sonar samples, stamped at the window centre.

    For even-length (shrunk edge) windows the lower median is used so the
    result is always one of the inputs.
    """
    if not window:
        raise ValueError("empty sonar window")
    ranges = sorted(s.range for s in window)
    centre = window[len(window) // 2] if half_width is None else window[min(half_width, len(window) - 1)]
    return SonarSample(centre.t, ranges[(len(ranges) - 1) // 2])


def filter_sonar_stream(stream: SonarStream, half_width: int = 2) -> SonarStream:
    """Centred running median over the whole stream; windows shrink at the ends."""
    n = len(stream)
    out = np.empty(n)
    for i in range(n):
        lo, hi = max(0, i - half_width), min(n, i + half_width + 1)
        w = np.sort(stream.range[lo:hi])
        out[i] = w[(len(w) - 1) // 2]
    return SonarStream(stream.t.copy(), out)


class SonarMedianFilter:
    """Streaming centred median with ``half_width`` samples of latency."""

    def __init__(self, half_width: int = 2):
        self.half_width = half_width
        self._buf: deque[SonarSample] = deque(maxlen=2 * half_width + 1)
        self._emitted = 0
        self._seen = 0

    def push(self, sample: SonarSample) -> list[SonarSample]:
        self._buf.append(sample)
        self._seen += 1
        out = []
        while self._emitted + self.half_width < self._seen:
            out.append(self._emit())
        return out

    def flush(self) -> list[SonarSample]:
        out = []
        while self._emitted < self._seen:
            out.append(self._emit())
        return out

    def _emit(self) -> SonarSample:
        # index of the sample to emit inside the buffer
        first = self._seen - len(self._buf)
        c = self._emitted - first
        lo = max(0, c - self.half_width)
        hi = min(len(self._buf), c + self.half_width + 1)
        window = list(self._buf)[lo:hi]
        ranges = sorted(s.range for s in window)
        self._emitted += 1
        return SonarSample(self._buf[c].t, ranges[(len(ranges) - 1) // 2])


# --------------------------------------------------------------------------
# magnetometer
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MagneticSignature:
    t_center: float
    alt_amplitude_enu: np.ndarray  # microtesla, componentwise >= 0
    geomagnetic_body: np.ndarray
    window_span: float


def moving_average_taps(sample_rate: float, drive_frequency: float) -> np.ndarray:
    """Symmetric FIR spanning exactly one drive period.

    With ``N = round(fs / f)`` samples per period, an odd ``N`` is a plain
    boxcar; an even ``N`` uses ``N + 1`` taps with half-weight end taps
    (trapezoid rule), so the filter stays centred on a sample either way.
    """
    n = int(round(sample_rate / drive_frequency))
    if n < 2:
        raise ValueError("sample rate too low for the drive frequency")
    if n % 2:
        return np.full(n, 1.0 / n)
    taps = np.ones(n + 1)
    taps[0] = taps[-1] = 0.5
    return taps / n


def separate_fields(stream: MagStream, drive_frequency: float) -> tuple[MagStream, MagStream]:
    """Split raw magnetometer data into (geomagnetic, alternating) streams.

    The centred moving average over one drive period removes the sinusoid;
    outputs exist only where the full filter support is available.
    """
    if len(stream) < 3:
        raise ValueError("insufficient magnetometer samples")
    fs = 1.0 / np.median(np.diff(stream.t))
    if fs < 4.0 * drive_frequency:
        raise ValueError(f"magnetometer rate {fs:.1f} Hz below 4x drive frequency")
    taps = moving_average_taps(fs, drive_frequency)
    m = len(taps)
    if len(stream) < m:
        raise ValueError("insufficient magnetometer samples for one drive period")
    half = m // 2
    geo = np.column_stack([np.convolve(stream.field[:, k], taps, mode="valid") for k in range(3)])
    t = stream.t[half:len(stream) - half]
    alt = stream.field[half:len(stream) - half] - geo
    return MagStream(t, geo), MagStream(t.copy(), alt)


def single_bin_amplitude(x: np.ndarray, t: np.ndarray, frequency: float) -> np.ndarray:
    """``2 |sum x[n] exp(-j 2 pi f t_n)| / N`` along axis 0."""
    phase = np.exp(-2j * np.pi * frequency * (t - t[0]))
    return 2.0 * np.abs(phase @ x) / len(t)


class OrientationGap(ValueError):
    pass


def interpolate_orientations(times: np.ndarray, orient_t: np.ndarray, orient_q: np.ndarray,
                             max_gap: float = 0.05) -> np.ndarray:
    """Slerp world<-body rotation matrices at ``times``; (N, 3, 3)."""
    orient_t = np.asarray(orient_t, dtype=float)
    if len(orient_t) == 0 or times[0] < orient_t[0] - 1e-9 or times[-1] > orient_t[-1] + 1e-9:
        raise OrientationGap("orientation stream does not cover the window")
    lo = max(0, np.searchsorted(orient_t, times[0], side="right") - 1)
    hi = min(len(orient_t), np.searchsorted(orient_t, times[-1], side="left") + 1)
    if hi - lo > 1 and np.max(np.diff(orient_t[lo:hi])) > max_gap + 1e-9:
        raise OrientationGap("orientation gap inside window exceeds tolerance")
    idx = np.clip(np.searchsorted(orient_t, times, side="right") - 1, 0, len(orient_t) - 1)
    seg = np.unique(idx)
    R0 = {int(i): quat_to_rotmat(orient_q[i]) for i in seg}
    d = np.zeros((len(orient_t), 3))
    span = np.ones(len(orient_t))
    for i in seg:
        if i + 1 < len(orient_t):
            d[i] = log_rotmat(R0[int(i)].T @ quat_to_rotmat(orient_q[i + 1]))
            span[i] = max(orient_t[i + 1] - orient_t[i], 1e-12)
    alpha = np.clip((times - orient_t[idx]) / span[idx], 0.0, 1.0)
    base = np.array([R0[int(i)] for i in seg])[np.searchsorted(seg, idx)]
    return base @ exp_rotmat_batch(alpha[:, None] * d[idx])


def exp_rotmat_batch(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula over an (N, 3) array."""
    th = np.linalg.norm(omega, axis=1)
    small = th < 1e-6
    ths = np.where(small, 1.0, th)
    a = np.where(small, 1.0 - th ** 2 / 6.0, np.sin(ths) / ths)
    b = np.where(small, 0.5 - th ** 2 / 24.0, (1.0 - np.cos(ths)) / ths ** 2)
    K = np.zeros((len(omega), 3, 3))
    K[:, 0, 1], K[:, 0, 2], K[:, 1, 2] = -omega[:, 2], omega[:, 1], -omega[:, 0]
    K[:, 1, 0], K[:, 2, 0], K[:, 2, 1] = omega[:, 2], -omega[:, 1], omega[:, 0]
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


def extract_signature(alternating: MagStream, orient_t, orient_q, drive_frequency: float,
                      geomagnetic_body=None, max_gap: float = 0.05) -> MagneticSignature:
    """ENU alternating-field amplitudes over one collection window.

    ``orient_q`` are world<-body quaternions sampled at ``orient_t``.
    """
    if len(alternating) < 2:
        raise ValueError("window too short")
    R = interpolate_orientations(alternating.t, orient_t, orient_q, max_gap)
    enu = np.einsum("nij,nj->ni", R, alternating.field)
    amp = single_bin_amplitude(enu, alternating.t, drive_frequency)
    dt = np.median(np.diff(alternating.t))
    span = float(alternating.t[-1] - alternating.t[0] + dt)
    geo = np.zeros(3) if geomagnetic_body is None else np.asarray(geomagnetic_body, dtype=float)
    return MagneticSignature(float(0.5 * (alternating.t[0] + alternating.t[-1])), amp, geo, span)


def window_length(sample_rate: float, drive_frequency: float, period: float) -> int:
    """Sample count of a collection window snapped to whole drive periods."""
    per = sample_rate / drive_frequency
    cycles = max(1, int(round(period * drive_frequency)))
    return int(round(cycles * per))


def signature_series(geo: MagStream, alt: MagStream, orient_t, orient_q, drive_frequency: float,
                     period: float = 2.0, interval: float = 0.4) -> list[MagneticSignature]:
    """Overlapping windows of ``period`` seconds, one signature every ``interval`` seconds."""
    if len(alt) < 2:
        return []
    fs = 1.0 / np.median(np.diff(alt.t))
    n = window_length(fs, drive_frequency, period)
    hop = max(1, int(round(interval * fs)))
    out = []
    for start in range(0, len(alt) - n + 1, hop):
        sl = slice(start, start + n)
        win = MagStream(alt.t[sl], alt.field[sl])
        geo_mean = geo.field[sl].mean(axis=0)
        out.append(extract_signature(win, orient_t, orient_q, drive_frequency, geo_mean))
    return out


class SignatureExtractor:
    """Incremental separation + signature extraction with bounded memory.

    Raw samples are pushed as they arrive; orientations are pushed by the
    odometry. ``poll`` returns signatures whose window is fully covered by
    orientation data.
    """

    def __init__(self, sample_rate: float, drive_frequency: float, period: float = 2.0,
                 interval: float = 0.4, max_gap: float = 0.05):
        self.fs = sample_rate
        self.f = drive_frequency
        self.taps = moving_average_taps(sample_rate, drive_frequency)
        self.n = window_length(sample_rate, drive_frequency, period)
        self.hop = max(1, int(round(interval * sample_rate)))
        self.max_gap = max_gap
        self._raw_t: list[float] = []
        self._raw_b: list[np.ndarray] = []
        self._sep_t: list[float] = []
        self._alt: list[np.ndarray] = []
        self._geo: list[np.ndarray] = []
        self._or_t: list[float] = []
        self._or_q: list[np.ndarray] = []
        self._next_start = 0  # index into the separated buffer
        self._drop = 0

    def push_mag(self, t: float, field_body):
        self._raw_t.append(float(t))
        self._raw_b.append(np.asarray(field_body, dtype=float))
        m = len(self.taps)
        if len(self._raw_b) >= m:
            block = np.array(self._raw_b[-m:])
            geo = self.taps @ block
            c = len(self._raw_b) - 1 - m // 2
            self._sep_t.append(self._raw_t[c])
            self._geo.append(geo)
            self._alt.append(self._raw_b[c] - geo)
            del self._raw_t[:-m]
            del self._raw_b[:-m]

    def push_mag_block(self, t: np.ndarray, field: np.ndarray):
        """Vectorised equivalent of repeated ``push_mag``."""
        if len(t) == 0:
            return
        m = len(self.taps)
        rt = np.concatenate([np.asarray(self._raw_t), t])
        rb = np.concatenate([np.asarray(self._raw_b).reshape(-1, 3), field])
        if len(rt) >= m:
            geo = np.column_stack([np.convolve(rb[:, k], self.taps[::-1], mode="valid") for k in range(3)])
            half = m // 2
            centre = slice(half, len(rt) - (m - 1 - half))
            self._sep_t.extend(rt[centre].tolist())
            self._geo.extend(geo)
            self._alt.extend(rb[centre] - geo)
            rt, rb = rt[-(m - 1):], rb[-(m - 1):]
        self._raw_t = rt.tolist()
        self._raw_b = list(rb)

    def push_orientation(self, t: float, q):
        self._or_t.append(float(t))
        self._or_q.append(np.asarray(q, dtype=float))

    def poll(self) -> list[MagneticSignature]:
        out = []
        while True:
            s = self._next_start - self._drop
            e = s + self.n
            if e > len(self._sep_t):
                break
            t_end = self._sep_t[e - 1]
            if not self._or_t or self._or_t[-1] < t_end - 1e-9:
                break
            t_win = np.array(self._sep_t[s:e])
            win = MagStream(t_win, np.array(self._alt[s:e]))
            geo = np.mean(self._geo[s:e], axis=0)
            try:
                out.append(extract_signature(win, self._or_t, self._or_q, self.f, geo, self.max_gap))
            except OrientationGap:
                pass
            self._next_start += self.hop
        self._trim()
        return out

    def _trim(self):
        cut = self._next_start - self._drop
        if cut > 4 * self.n:
            k = cut - self.n
            del self._sep_t[:k], self._alt[:k], self._geo[:k]
            self._drop += k
        if len(self._or_t) > 2 and self._sep_t:
            t0 = self._sep_t[max(0, self._next_start - self._drop)] if self._next_start - self._drop < len(self._sep_t) else self._sep_t[-1]
            i = int(np.searchsorted(self._or_t, t0)) - 2
            if i > 0:
                del self._or_t[:i], self._or_q[:i]


def write_signature_csv(path, signatures: list[MagneticSignature]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "B_E", "B_N", "B_U"])
        for s in signatures:
            w.writerow([f"{s.t_center:.6f}"] + [f"{v:.9f}" for v in s.alt_amplitude_enu])


# --------------------------------------------------------------------------
# IMU preintegration
# --------------------------------------------------------------------------

# error-state ordering shared with the odometry: p, theta, v, b_a, b_g
P, TH, V, BA, BG = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))


@dataclass
class PreintegratedImu:
    dt_total: float
    delta_p: np.ndarray
    delta_v: np.ndarray
    delta_R: np.ndarray
    covariance: np.ndarray  # 15x15 over (p, theta, v, b_a, b_g)
    jacobian: np.ndarray  # 15x15 d(state at end)/d(state at start); bias columns are the bias Jacobians
    bias_acc: np.ndarray
    bias_gyro: np.ndarray
    samples: ImuStream | None = field(default=None, repr=False)

    @property
    def delta_q(self) -> np.ndarray:
        return rotmat_to_quat(self.delta_R)

    @property
    def dp_dba(self):
        return self.jacobian[P, BA]

    @property
    def dp_dbg(self):
        return self.jacobian[P, BG]

    @property
    def dv_dba(self):
        return self.jacobian[V, BA]

    @property
    def dv_dbg(self):
        return self.jacobian[V, BG]

    @property
    def dR_dbg(self):
        return self.jacobian[TH, BG]

    def corrected(self, ba, bg):
        """First-order bias update of (delta_p, delta_v, delta_R)."""
        dba = np.asarray(ba) - self.bias_acc
        dbg = np.asarray(bg) - self.bias_gyro
        dp = self.delta_p + self.dp_dba @ dba + self.dp_dbg @ dbg
        dv = self.delta_v + self.dv_dba @ dba + self.dv_dbg @ dbg
        dR = self.delta_R @ exp_rotmat(self.dR_dbg @ dbg)
        return dp, dv, dR


def preintegrate(imu: ImuStream, bias_acc, bias_gyro, noise: SensorNoiseSpec) -> PreintegratedImu:
    """Midpoint preintegration in the frame of the first sample.

    The Jacobian and covariance are exact linearisations of this discrete
    scheme, so the bias Jacobians agree with finite differences to round-off.
    """
    t = np.asarray(imu.t, dtype=float)
    if len(t) < 2:
        if len(t) == 1:
            return _identity_preint(bias_acc, bias_gyro, imu)
        raise ValueError("need at least one IMU sample")
    if np.any(np.diff(t) <= 0.0):
        raise ValueError("IMU timestamps must be strictly increasing")
    ba = np.asarray(bias_acc, dtype=float)
    bg = np.asarray(bias_gyro, dtype=float)
    acc = imu.acc - ba
    gyr = imu.gyro - bg

    dp = np.zeros(3)
    dv = np.zeros(3)
    dR = np.eye(3)
    J = np.eye(15)
    cov = np.zeros((15, 15))
    I3 = np.eye(3)
    sa2, sg2 = noise.accel_noise_density ** 2, noise.gyro_noise_density ** 2
    swa2, swg2 = noise.accel_bias_walk ** 2, noise.gyro_bias_walk ** 2
    G = np.zeros((15, 12))
    G[BA, 6:9] = I3
    G[BG, 9:12] = I3
    q_white = np.repeat([sg2, sa2], 3)
    q_walk = np.repeat([swa2, swg2], 3)

    for k in range(len(t) - 1):
        h = t[k + 1] - t[k]
        phi = 0.5 * (gyr[k] + gyr[k + 1]) * h
        E = exp_rotmat(phi)
        Jr = right_jacobian(phi)
        dR1 = dR @ E
        a0 = dR @ acc[k]
        a1 = dR1 @ acc[k + 1]
        am = 0.5 * (a0 + a1)

        F = np.eye(15)
        # theta
        F[TH, TH] = E.T
        F[TH, BG] = -Jr * h
        # d(a_mid)/d(theta_k, bg, ba)
        A0 = -dR @ skew(acc[k])
        A1 = -dR1 @ skew(acc[k + 1])
        dam_dth = 0.5 * (A0 + A1 @ E.T)
        dam_dbg = 0.5 * (A1 @ (-Jr * h))
        dam_dba = -0.5 * (dR + dR1)
        F[V, TH] = h * dam_dth
        F[V, BG] = h * dam_dbg
        F[V, BA] = h * dam_dba
        F[P, V] = h * I3
        F[P, TH] = 0.5 * h * h * dam_dth
        F[P, BG] = 0.5 * h * h * dam_dbg
        F[P, BA] = 0.5 * h * h * dam_dba

        # discrete noise: white accel/gyro on the interval, bias random walks;
        # white gyro / accel noise enters exactly like a bias perturbation
        G[:9, 0:3] = F[:9, BG]
        G[:9, 3:6] = F[:9, BA]
        q = np.concatenate([q_white / h, q_walk * h])

        J = F @ J
        cov = F @ cov @ F.T + (G * q) @ G.T
        dp = dp + dv * h + 0.5 * am * h * h
        dv = dv + am * h
        dR = dR1

    cov = 0.5 * (cov + cov.T)
    return PreintegratedImu(float(t[-1] - t[0]), dp, dv, dR, cov, J, ba.copy(), bg.copy(), imu)


def _identity_preint(ba, bg, imu=None) -> PreintegratedImu:
    return PreintegratedImu(0.0, np.zeros(3), np.zeros(3), np.eye(3), np.zeros((15, 15)), np.eye(15),
                            np.asarray(ba, dtype=float).copy(), np.asarray(bg, dtype=float).copy(), imu)


def compose_preintegrations(a: PreintegratedImu, b: PreintegratedImu) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(delta_p, delta_v, delta_R) of ``a`` followed by ``b`` (same biases)."""
    dp = a.delta_p + a.delta_v * b.dt_total + a.delta_R @ b.delta_p
    dv = a.delta_v + a.delta_R @ b.delta_v
    return dp, dv, a.delta_R @ b.delta_R
