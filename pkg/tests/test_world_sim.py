import hashlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vims.geometry import Pose3, rpy_rotmat
from vims.preprocessing import preintegrate
from vims.sim.coil import CoilSpec, SingularFieldPoint, coil_field, dipole_field, on_axis_field
from vims.sim.io import load_dataset, save_dataset
from vims.sim.scenario import ConfigError, ScenarioConfig, generate_scenario
from vims.sim.sensors import (NoSonarIntersection, camera_pose, sample_frame,
                              sample_magnetometer, sample_sonar)
from vims.sim.world import (LandmarkField, SeafloorModel, SensorNoiseSpec, World)

MU0 = 4e-7 * np.pi
COIL = CoilSpec(center=np.array([1.0, -2.0, 0.1]), radius=0.3, turns=330, current_amplitude=2.0)


def tiny_world(positions=None, coil=COIL, floor=0.0):
    positions = np.zeros((0, 3)) if positions is None else np.atleast_2d(positions)
    n = len(positions)
    lm = LandmarkField(np.arange(n), positions, np.ones(n), np.zeros((n, 32), np.uint8), np.zeros(n), np.arange(n))
    return World(coil, SeafloorModel(floor, 0.0), lm)


# ---------------------------------------------------------------- coil
def test_coil_on_axis_closed_form():
    for z in np.linspace(-3.0, 3.0, 25):
        B = coil_field(COIL, COIL.center + z * COIL.axis)
        ref = MU0 * COIL.ampere_turns * 0.09 / (2 * (0.09 + z * z) ** 1.5)
        assert abs(B[2] - ref) / ref < 1e-10
        assert np.abs(B[:2]).max() < 1e-12 * ref
        assert abs(on_axis_field(COIL, z) - ref) / ref < 1e-14


def test_coil_matches_dipole_far_away(rng):
    for _ in range(50):
        d = rng.normal(size=3)
        p = COIL.center + 50 * COIL.radius * d / np.linalg.norm(d)
        B, D = coil_field(COIL, p), dipole_field(COIL, p)
        assert np.linalg.norm(B - D) / np.linalg.norm(D) < 0.01


def test_coil_equatorial_symmetry():
    a = coil_field(COIL, COIL.center + [1.2, 0.0, 0.0])
    b = coil_field(COIL, COIL.center + [-1.2, 0.0, 0.0])
    assert np.isclose(a[2], b[2], rtol=1e-12) and np.isclose(a[0], -b[0], rtol=1e-12)


def test_coil_mirror_symmetry():
    a = coil_field(COIL, COIL.center + [0.7, 0.2, 0.5])
    b = coil_field(COIL, COIL.center + [0.7, 0.2, -0.5])
    assert np.allclose(a[:2], -b[:2], rtol=1e-12) and np.isclose(a[2], b[2], rtol=1e-12)


def test_coil_singular_near_wire():
    with pytest.raises(SingularFieldPoint):
        coil_field(COIL, COIL.center + [0.305, 0.0, 0.0])


def test_coil_spec_validation():
    with pytest.raises(ValueError):
        CoilSpec(radius=0.0)
    with pytest.raises(ValueError):
        CoilSpec(turns=0)


@given(st.integers(0, 2**32 - 1))
def test_coil_divergence_free(seed):
    rng = np.random.default_rng(seed)
    p = COIL.center + rng.uniform(-2.0, 2.0, 3)
    if abs(np.hypot(np.linalg.norm(p[:2] - COIL.center[:2]) - 0.3, p[2] - COIL.center[2])) < 0.1:
        return
    h = 1e-4
    div = sum((coil_field(COIL, p + h * e)[k] - coil_field(COIL, p - h * e)[k]) / (2 * h)
              for k, e in enumerate(np.eye(3)))
    scale = np.linalg.norm(coil_field(COIL, p)) / np.linalg.norm(p - COIL.center)
    assert abs(div) < 1e-6 * scale + 1e-18


# ---------------------------------------------------------------- magnetometer
def test_magnetometer_zero_current_is_geomagnetic(rng):
    world = tiny_world(coil=CoilSpec(current_amplitude=0.0))
    s = sample_magnetometer(world, Pose3.identity(), 0.3, SensorNoiseSpec.noiseless(), rng)
    assert np.array_equal(s.field_body, world.constants.geomagnetic_field_world)


def test_magnetometer_hand_composed(rng):
    world = tiny_world()
    R = rpy_rotmat(0.1, -0.2, 1.1)
    p = np.array([2.0, -1.0, 2.0])
    t = 0.1234
    got = sample_magnetometer(world, Pose3.from_rt(R, p), t, SensorNoiseSpec.noiseless(), rng).field_body
    want = R.T @ world.constants.geomagnetic_field_world + R.T @ (
        coil_field(COIL, p) * 1e6 * np.sin(2 * np.pi * 50.0 * t))
    assert np.abs(got - want).max() < 1e-12


def test_magnetometer_noise_covariance():
    world = tiny_world(coil=CoilSpec(current_amplitude=0.0))
    rng = np.random.default_rng(3)
    sigma = 0.05
    from vims.sim.sensors import magnetometer_batch
    n = 10 ** 6
    b = magnetometer_batch(world, np.zeros((n, 3)), np.broadcast_to(np.eye(3), (n, 3, 3)), np.zeros(n),
                           SensorNoiseSpec(mag_noise_sigma=sigma), rng)
    C = np.cov(b.T)
    assert np.allclose(np.diag(C), sigma ** 2, rtol=0.05)
    assert np.abs(C - np.diag(np.diag(C))).max() < 0.05 * sigma ** 2


# ---------------------------------------------------------------- sonar
def test_sonar_level_vehicle(rng):
    world = tiny_world()
    s = sample_sonar(world, Pose3(t=[0, 0, 2.0]), SensorNoiseSpec.noiseless(), rng)
    # sonar sits 5 cm below the body origin
    assert abs(s.range - 1.95) < 1e-12


def test_sonar_pitched_vs_ray_plane_oracle(rng):
    world = tiny_world()
    for pitch in (0.1, 0.3, -0.25):
        R = rpy_rotmat(0.05, pitch, 0.7)
        p = np.array([1.0, 2.0, 2.5])
        r = sample_sonar(world, Pose3.from_rt(R, p), SensorNoiseSpec.noiseless(), rng).range
        Tbs = world.extrinsics.body_from_sonar
        o = p + R @ Tbs.t
        d = R @ Tbs.R[:, 2]
        assert abs(r - (0.0 - o[2]) / d[2]) < 1e-12
        assert abs(r - (o[2]) / np.cos(np.arccos(-d[2]))) < 1e-9


def test_sonar_no_intersection(rng):
    world = tiny_world()
    with pytest.raises(NoSonarIntersection):
        sample_sonar(world, Pose3.from_rt(rpy_rotmat(np.pi, 0, 0), [0, 0, 2.0]), SensorNoiseSpec.noiseless(), rng)


def test_sonar_multipath_fraction():
    from vims.sim.sensors import sonar_batch
    world = tiny_world()
    rng = np.random.default_rng(11)
    n = 10 ** 4
    _, flags = sonar_batch(world, np.tile([0, 0, 2.0], (n, 1)), np.broadcast_to(np.eye(3), (n, 3, 3)),
                           SensorNoiseSpec(sonar_multipath_prob=0.1), rng)
    assert abs(flags.mean() - 0.1) < 0.01


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        SensorNoiseSpec(sonar_multipath_prob=0.5)
    with pytest.raises(ValueError):
        SensorNoiseSpec(mag_noise_sigma=-1.0)


# ---------------------------------------------------------------- camera
def test_landmark_on_optical_axis(rng):
    world = tiny_world([[0.0, 0.0, 0.0]])
    body = Pose3(t=[0.0, 0.0, 2.0])
    Twc = camera_pose(world, body)
    world = tiny_world([Twc.t - [0, 0, 2.0]])
    obs = sample_frame(world, body, None, SensorNoiseSpec.noiseless(), rng)
    assert list(obs.ids) == [0]
    assert np.abs(obs.uv[0]).max() < 1e-12


def test_pinhole_oracle(rng):
    pts = np.column_stack([rng.uniform(-1.0, 1.0, 30), rng.uniform(-1.0, 1.0, 30), np.zeros(30)])
    world = tiny_world(pts)
    body = Pose3.from_rt(rpy_rotmat(0.05, -0.04, 0.3), [0.1, 0.2, 2.0])
    obs = sample_frame(world, body, None, SensorNoiseSpec.noiseless(), rng)
    assert len(obs.ids) > 10
    Twc = camera_pose(world, body)
    for k, lid in enumerate(obs.ids):
        pc = Twc.R.T @ (pts[lid] - Twc.t)
        assert np.abs(obs.uv[k] - pc[:2] / pc[2]).max() < 1e-12


def test_landmark_beyond_visibility_absent(rng):
    world = tiny_world([[0.1, 0.0, -9.0]])
    obs = sample_frame(world, Pose3(t=[0, 0, 2.0]), None, SensorNoiseSpec.noiseless(), rng)
    assert len(obs.ids) == 0


# ---------------------------------------------------------------- scenarios
def short_config(family="lawnmower", **kw):
    return ScenarioConfig.for_family(family, duration=kw.pop("duration", 6.0), **kw)


def test_config_validation():
    with pytest.raises(ConfigError):
        ScenarioConfig.for_family("spiral")
    with pytest.raises((ConfigError, ValueError)):
        ScenarioConfig.for_family("lawnmower", drive_frequency=600.0)


def test_same_seed_identical_files(tmp_path):
    cfg = short_config()
    for name in ("a", "b"):
        save_dataset(generate_scenario(cfg, 5), tmp_path / name)
    for f in ("dataset.jsonl", "groundtruth.tum"):
        h = [hashlib.sha256((tmp_path / n / f).read_bytes()).hexdigest() for n in ("a", "b")]
        assert h[0] == h[1]


def test_dataset_roundtrip(tmp_path):
    ds = generate_scenario(short_config(duration=3.0), 2)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert np.allclose(back.imu.acc, ds.imu.acc, atol=1e-9)
    assert len(back.frames) == len(ds.frames)
    assert np.array_equal(back.frames[5].ids, ds.frames[5].ids)


def test_streams_rates_and_ordering():
    ds = generate_scenario(short_config(), 0)
    for t, rate in ((ds.imu.t, 200), (ds.mag.t, 1000), (ds.sonar.t, 10), (ds.ground_truth.t, 20)):
        assert np.all(np.diff(t) > 0)
        assert np.allclose(np.diff(t), 1.0 / rate)
    assert all(i in ds.world.landmarks for f in ds.frames for i in f.ids)


def test_speed_cap_honored():
    ds = generate_scenario(ScenarioConfig.for_family("lawnmower", speed=0.3), 0)
    assert np.linalg.norm(ds.ground_truth.velocity, axis=1).max() <= 0.38


def test_cruise_low_acceleration():
    cfg = ScenarioConfig.for_family("cruise")
    st_ = cfg.trajectory().evaluate(np.arange(0.0, 120.0, 0.05))
    assert np.linalg.norm(st_.acceleration, axis=1).max() <= 0.05


def test_landmarks_near_floor():
    ds = generate_scenario(short_config(), 1)
    z = ds.world.landmarks.positions[:, 2]
    assert np.all(np.abs(z - ds.world.seafloor.plane_height) <= 4 * ds.world.seafloor.roughness_sigma + 1e-12)


def test_stream_split_keeps_other_draws():
    a = generate_scenario(short_config(), 3)
    b = generate_scenario(short_config(mag_noise_sigma=0.2), 3)
    assert np.array_equal(a.imu.acc, b.imu.acc)
    assert np.array_equal(a.sonar.range, b.sonar.range)
    assert not np.array_equal(a.mag.field, b.mag.field)


def test_noise_free_dead_reckoning():
    cfg = ScenarioConfig.for_family("lawnmower", duration=60.0)
    for k in SensorNoiseSpec.__dataclass_fields__:
        setattr(cfg, k, 0.0)
    ds = generate_scenario(cfg, 0)
    st0 = cfg.trajectory().evaluate(np.array([0.0, 60.0]))
    pre = preintegrate(ds.imu, np.zeros(3), np.zeros(3), ds.noise)
    g = ds.world.constants.gravity
    R0, p0, v0 = st0.rotation[0], st0.position[0], st0.velocity[0]
    T = pre.dt_total
    p_end = p0 + v0 * T + 0.5 * g * T * T + R0 @ pre.delta_p
    assert np.linalg.norm(p_end - st0.position[1]) < 1e-3


def test_cruise_is_low_acceleration_up_to_the_last_sample():
    gt = generate_scenario(ScenarioConfig.for_family("cruise"), 0).ground_truth
    acc = np.linalg.norm(np.gradient(gt.velocity, gt.t, axis=0), axis=1)
    assert acc.max() <= 0.05
    assert np.linalg.norm(gt.velocity[-1]) > 0.2
