import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_rotation
from vims.evaluation import (InsufficientPairs, PRPoint, RunReport, align_trajectories, associate, ate_rmse,
                             evaluate_trajectory, f_beta, pr_curve, pr_point, recognition_matrix, revisit_labels,
                             scale_error, umeyama)
from vims.geometry import quat_to_rotmat, rotmat_to_quat, yaw_rotmat
from vims.loop_closing import DecisionRow


def random_traj(rng, n=50):
    p = np.cumsum(rng.normal(0, 0.3, (n, 3)), axis=0)
    q = np.array([rotmat_to_quat(random_rotation(rng)) for _ in range(n)])
    return np.arange(n) * 0.1, p, q


def transform(R, t, p, q, s=1.0):
    return s * p @ R.T + t, np.array([rotmat_to_quat(R @ quat_to_rotmat(x)) for x in q])


# ---------------------------------------------------------------- alignment
def test_umeyama_identity(rng):
    _, p, _ = random_traj(rng)
    R, t, s = umeyama(p, p)
    assert np.allclose(R, np.eye(3), atol=1e-12) and np.allclose(t, 0, atol=1e-12) and s == 1.0


@given(st.integers(0, 2**32 - 1))
def test_umeyama_exact_recovery(seed):
    rng = np.random.default_rng(seed)
    _, p, _ = random_traj(rng)
    R0, t0 = random_rotation(rng), rng.uniform(-10, 10, 3)
    R, t, _ = umeyama(p, p @ R0.T + t0)
    assert np.abs(R - R0).max() < 1e-9 and np.abs(t - t0).max() < 1e-9
    s0 = rng.uniform(0.5, 2.0)
    R, t, s = umeyama(p, s0 * p @ R0.T + t0, with_scale=True)
    assert abs(s - s0) < 1e-9 and np.abs(R - R0).max() < 1e-9


def test_umeyama_noise_rmse_statistics():
    rng = np.random.default_rng(7)
    sigma, n = 0.05, 4000
    p = rng.uniform(-20, 20, (n, 3))
    R0, t0 = random_rotation(rng), rng.uniform(-5, 5, 3)
    dst = p @ R0.T + t0 + rng.normal(0, sigma, (n, 3))
    R, t, _ = umeyama(p, dst)
    rmse = np.sqrt(np.mean(np.sum((p @ R.T + t - dst) ** 2, axis=1)))
    assert rmse == pytest.approx(sigma * np.sqrt(3), rel=0.10)


def test_umeyama_needs_three_pairs():
    with pytest.raises(InsufficientPairs):
        umeyama(np.zeros((2, 3)), np.zeros((2, 3)))


def test_associate_tolerance():
    ie, ir = associate([0.0, 1.02, 2.2, 3.0], [0.0, 1.0, 2.0, 3.04])
    assert ie.tolist() == [0, 1, 3] and ir.tolist() == [0, 1, 3]


def test_align_trajectories_needs_pairs(rng):
    t, p, _ = random_traj(rng, 10)
    with pytest.raises(InsufficientPairs):
        align_trajectories(t + 100.0, p, t, p)


# ---------------------------------------------------------------- ATE
def test_ate_zero(rng):
    t, p, q = random_traj(rng)
    et, er, _ = evaluate_trajectory(t, p, q, t, p, q)
    assert et < 1e-12 and er < 1e-6


def test_ate_rigid_transform_is_removed(rng):
    t, p, q = random_traj(rng)
    pe, qe = transform(random_rotation(rng), rng.normal(0, 5, 3), p, q)
    et, er, _ = evaluate_trajectory(t, pe, qe, t, p, q)
    assert et < 1e-9 and er < 1e-6


def test_ate_constant_offset_without_alignment(rng):
    _, p, q = random_traj(rng)
    et, er = ate_rmse(p + [1.0, 0, 0], q, p, q)
    assert et == pytest.approx(1.0, abs=1e-12) and er == pytest.approx(0.0, abs=1e-6)


def test_ate_hand_three_poses():
    p_ref = np.zeros((3, 3))
    p_est = np.array([[1.0, 0, 0], [0, 2.0, 0], [0, 0, 2.0]])
    q_ref = np.tile([1.0, 0, 0, 0], (3, 1))
    q_est = np.array([rotmat_to_quat(yaw_rotmat(np.radians(a))) for a in (0.0, 3.0, 4.0)])
    et, er = ate_rmse(p_est, q_est, p_ref, q_ref)
    assert et == pytest.approx(np.sqrt(9.0 / 3.0), abs=1e-12)
    assert er == pytest.approx(np.sqrt(25.0 / 3.0), abs=1e-12)


def test_scale_error(rng):
    t, p, q = random_traj(rng)
    assert scale_error(t, 1.25 * p, t, p) == pytest.approx(0.25, abs=1e-9)


# ---------------------------------------------------------------- precision / recall
def test_f_beta_examples():
    assert f_beta(1.0, 1.0) == 1.0
    assert f_beta(0.0, 0.0) == 0.0
    assert f_beta(2 / 3, 1 / 2) == pytest.approx(5 / 8, abs=1e-15)
    assert f_beta(0.5, 0.5, beta=2.0) == pytest.approx(0.5)


def row(q, c, bow, mag=float("inf"), rank=-1, tied=0, verdict="rejected"):
    return DecisionRow(q, c, mag, bow, "bow", verdict, 0, rank, tied)


def hand_log():
    log = [row(60, 5, 0.9, 0.1, 0, 1), row(60, 6, 0.2, 0.5, 1, 1),
           row(61, 7, 0.5, 0.2, 0, 1),
           row(62, 8, 0.1, 0.3, 0, 1),
           row(63, 9, 0.4, 2.0, 0, 1)]
    labels = [set() for _ in range(64)]
    labels[60], labels[61], labels[62], labels[63] = {5}, {20}, {8}, {9}
    return log, labels


def test_pr_hand_log():
    log, labels = hand_log()
    # visual top-1 at tau_bow 0.3: 60 -> 5 (tp), 61 -> 7 (fp, and its revisit is missed),
    # 62 -> none (fn), 63 -> 9 (tp)
    pt = pr_point(log, labels, "visual", np.inf, 0.3)
    assert (pt.tp, pt.fp, pt.fn) == (2, 1, 2)
    assert pt.precision == 2 / 3 and pt.recall == 1 / 2 and pt.f05 == pytest.approx(5 / 8)
    # the magnetic gate at 1.0 drops query 63's only candidate
    pt = pr_point(log, labels, "hierarchical", 1.0, 0.3)
    assert (pt.tp, pt.fp, pt.fn) == (1, 1, 3)
    # magnetic-only: the top-ranked tied submap within tau_mag
    pt = pr_point(log, labels, "magnetic", 0.25, 0.0)
    assert (pt.tp, pt.fp, pt.fn) == (1, 1, 3)


def test_pr_all_correct():
    log = [row(q, q - 55, 0.8, 0.1, 0, 1) for q in range(60, 70)]
    labels = [set() for _ in range(70)]
    for q in range(60, 70):
        labels[q] = {q - 55}
    for mode in ("visual", "hierarchical", "magnetic"):
        pts, best = pr_curve(log, labels, mode)
        for pt in pts:
            assert pt.precision == 1.0
        assert best.recall == 1.0 and best.f05 == 1.0


def test_pr_curve_shapes():
    log, labels = hand_log()
    pts, _ = pr_curve(log, labels, "hierarchical", mag_grid=[0.5, 1.0, 3.0], bow_grid=[0.0, 0.5])
    assert len(pts) == 6
    pts, _ = pr_curve(log, labels, "visual", bow_grid=[0.0, 0.5, 1.0])
    assert [p.tau_bow for p in pts] == [0.0, 0.5, 1.0]
    # raising the BoW threshold never adds detections
    dets = [p.tp + p.fp for p in pts]
    assert dets == sorted(dets, reverse=True)


def test_pr_point_bounds():
    p = PRPoint(0, 0, 3, 1, 2)
    assert 0 <= p.precision <= 1 and 0 <= p.recall <= 1


def test_revisit_labels():
    P = np.zeros((60, 3))
    P[:, 0] = np.arange(60) * 0.1
    P[55] = P[2] + [0.5, 0, 0]
    labels = revisit_labels(P, exclusion_gap=50)
    assert labels[10] == set()
    assert labels[55] == {0, 1, 2} | {k for k in range(5) if abs(P[k, 0] - P[55, 0]) < 1.0}
    assert all(k < q - 50 for q, s in enumerate(labels) for k in s)


# ---------------------------------------------------------------- recognition matrix
def test_recognition_matrix_examples():
    assert recognition_matrix([]).shape == (0, 0)
    M = recognition_matrix([row(60, 4, 0.7, verdict="accepted")], n=61)
    assert M.shape == (1, 61)
    finite = np.nan_to_num(M, nan=0.0)
    assert np.count_nonzero(finite) == 1 and M[0, 4] == 0.7
    assert np.isnan(M[0, 10:]).all() and not np.isnan(M[0, :10]).any()


def test_recognition_matrix_rows_per_query():
    log = [row(q, c, 0.5, verdict="accepted" if c == 1 else "rejected") for q in (55, 60, 70) for c in (1, 2)]
    M = recognition_matrix(log, n=71)
    assert M.shape[0] == 3
    assert (np.nan_to_num(M) > 0).sum() == 3


# ---------------------------------------------------------------- report
def test_run_report():
    with pytest.raises(ValueError):
        RunReport(loops_correct=3, loops_total=2)
    d = json.loads(RunReport(preset="full", trans_rmse=0.5).to_json())
    assert d["trans_rmse"] == 0.5 and d["rot_rmse"] is None and d["preset"] == "full"
