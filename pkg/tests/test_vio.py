import copy

import numpy as np
import pytest

from vims.geometry import Pose3, exp_rotmat, yaw_rotmat
from vims.sim.world import Extrinsics
from vims.vio import (NavState, VioConfig, feature_in_local_frame, optimize_window, reprojection_residual,
                      run_vio, sonar_altitude_residual)
from vio_fixtures import noiseless_dataset, truth_window

IDENT_EXT = Extrinsics(Pose3.identity(), Pose3.identity())


@pytest.fixture(scope="module")
def clean():
    return noiseless_dataset()


def nav(p=(0, 0, 0), R=None):
    return NavState(0.0, np.asarray(p, float), np.eye(3) if R is None else R, np.zeros(3), np.zeros(3), np.zeros(3))


def test_feature_point_identity():
    assert np.allclose(feature_in_local_frame(nav(), [0, 0, 1], 4.0, IDENT_EXT), [0, 0, 4])


def test_feature_point_recovers_landmark(clean):
    w = truth_window(clean)
    ext = clean.world.extrinsics
    for tr in w.tracks.values():
        assert np.linalg.norm(w.point(tr, ext) - clean.world.landmarks[tr.feature_id].position) < 1e-9


def test_feature_point_moves_along_ray(clean):
    w = truth_window(clean)
    tr = next(iter(w.tracks.values()))
    a = w.state(tr.anchor)
    ext = clean.world.extrinsics
    o = feature_in_local_frame(a, tr.ray, 0.0, ext)
    p1 = feature_in_local_frame(a, tr.ray, tr.depth, ext)
    p2 = feature_in_local_frame(a, tr.ray, 2 * tr.depth, ext)
    assert np.allclose(p2 - o, 2 * (p1 - o), atol=1e-12)


def test_sonar_residual_zero_on_plane(clean):
    w = truth_window(clean)
    ext = clean.world.extrinsics
    for tr in w.tracks.values():
        for kf in tr.observations:
            r = sonar_altitude_residual(w.state(kf), w.sonar[kf], w.state(tr.anchor), tr.ray, tr.depth, ext)
            assert abs(r) < 1e-9


def test_sonar_residual_depth_perturbation():
    s = nav((0, 0, 2.0))
    ray = np.array([0.3, -0.2, 1.0])
    ray /= np.linalg.norm(ray)
    # downward camera and sonar at the body origin
    down = Pose3.from_rt(np.diag([1.0, -1.0, -1.0]), np.zeros(3))
    ext = Extrinsics(down, down)
    lam = 2.0 / ray[2]
    assert abs(sonar_altitude_residual(s, 2.0, s, ray, lam, ext)) < 1e-12
    r = sonar_altitude_residual(s, 2.0, s, ray, lam + 0.5, ext)
    assert r == pytest.approx(0.5 * ray[2], abs=1e-12)  # the point moves 0.5 cos(angle) deeper


def test_sonar_residual_affine_in_depth(clean):
    w = truth_window(clean)
    ext = clean.world.extrinsics
    tr = next(iter(w.tracks.values()))
    f = [sonar_altitude_residual(w.states[0], 1.9, w.state(tr.anchor), tr.ray, tr.depth + d, ext)
         for d in (-0.1, 0.0, 0.1)]
    assert abs(f[0] - 2 * f[1] + f[2]) < 1e-12


def test_reprojection_truth_and_anchor(clean):
    w = truth_window(clean)
    ext = clean.world.extrinsics
    for tr in w.tracks.values():
        a = w.state(tr.anchor)
        for kf, uv in tr.observations.items():
            r = reprojection_residual(a, w.state(kf), tr.ray, tr.depth, uv, ext)
            assert np.abs(r).max() < 1e-9
        assert np.abs(reprojection_residual(a, a, tr.ray, tr.depth, tr.observations[tr.anchor], ext)).max() < 1e-12


def test_reprojection_behind_camera():
    s = nav()
    assert reprojection_residual(s, nav((0, 0, 10.0)), [0, 0, 1], 4.0, [0, 0], IDENT_EXT) is None


def test_window_fixed_point(clean):
    w = truth_window(clean)
    st, _, _ = optimize_window(w, VioConfig(), clean.world.extrinsics, clean.world.constants.gravity)
    assert st.iterations <= 2 and st.final_cost < 1e-12


def perturb(w, rng):
    for s in w.states[1:]:
        d, a = rng.normal(size=3), rng.normal(size=3)
        s.p = s.p + 0.05 * d / np.linalg.norm(d)
        s.R = s.R @ exp_rotmat(np.deg2rad(1.0) * a / np.linalg.norm(a))
    for tr in w.tracks.values():
        tr.depth *= 1.1


TIGHT = VioConfig(rel_tol=1e-12, abs_tol=0.0)


def test_window_recovers_truth(clean):
    w = truth_window(clean)
    truth = copy.deepcopy(w)
    perturb(w, np.random.default_rng(0))
    st, _, prob = optimize_window(w, TIGHT, clean.world.extrinsics, clean.world.constants.gravity)
    assert max(np.linalg.norm(a.p - b.p) for a, b in zip(w.states, truth.states)) < 1e-4
    active = [tr.feature_id for tr in prob.tracks]
    assert max(abs(w.tracks[k].depth - truth.tracks[k].depth) for k in active) < 1e-4
    assert all(b <= a for a, b in zip(st.costs, st.costs[1:]))


def test_window_gauge_invariance(clean):
    g = clean.world.constants.gravity
    ext = clean.world.extrinsics
    w1 = truth_window(clean)
    perturb(w1, np.random.default_rng(1))
    w2 = copy.deepcopy(w1)
    Ry, off = yaw_rotmat(0.7), np.array([3.0, -2.0, 0.5])
    for s in w2.states + [w2.prior]:
        s.p, s.R, s.v = Ry @ s.p + off, Ry @ s.R, Ry @ s.v
    optimize_window(w1, TIGHT, ext, g)
    optimize_window(w2, TIGHT, ext, g)
    for a, b in zip(w1.states, w2.states):
        assert np.linalg.norm(Ry @ a.p + off - b.p) < 1e-8
        assert np.abs(Ry @ a.R - b.R).max() < 1e-8


def test_chained_edges_telescope():
    ds = noiseless_dataset(duration=20.0)
    est = run_vio(ds)
    T = est.records[0].pose_local
    for e in est.edges:
        T = T @ e.relative
    assert T.almost_equal(est.records[-1].pose_local, 1e-9)
    assert all(np.allclose(e.information, e.information.T) for e in est.edges)
    assert all(np.linalg.eigvalsh(e.information).min() > -1e-6 * np.abs(e.information).max() for e in est.edges)


def test_noise_free_edges_match_truth():
    # steady attitude: the accelerometer-mean gravity alignment is exact only without oscillation
    ds = noiseless_dataset(duration=20.0, heave_amplitude=0.0, roll_amplitude=0.0, pitch_amplitude=0.0)
    est = run_vio(ds, VioConfig(rel_tol=1e-12, abs_tol=0.0))
    gt = ds.ground_truth
    worst = 0.0
    for e in est.edges:
        Ti, Tj = gt.pose(gt.index_at(e.t_i)), gt.pose(gt.index_at(e.t_j))
        ref = Ti.inverse() @ Tj
        worst = max(worst, np.linalg.norm(ref.t - e.relative.t))
    assert worst < 1e-6


def test_stationary_vehicle():
    ds = noiseless_dataset(duration=6.0, speed=1e-6, initial_speed=0.0, heave_amplitude=0.0,
                           roll_amplitude=0.0, pitch_amplitude=0.0)
    est = run_vio(ds)
    assert est.edges
    for e in est.edges:
        assert np.linalg.norm(e.relative.t) < 1e-3
