import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_rotation
from vims.geometry import (FrameMismatch, FrameTag, Pose3, WorldConstants, exp_rotmat, log_rotmat,
                           quat_normalize, quat_to_rotmat, rotmat_to_quat, so3_exp, so3_log,
                           transform_point, quat_mul, quat_rotate, right_jacobian, right_jacobian_inv)

vec3 = st.lists(st.floats(-3.0, 3.0, allow_nan=False), min_size=3, max_size=3).map(np.array)


def rodrigues(w):
    th = np.linalg.norm(w)
    k = w / th
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * K @ K


def test_so3_exp_identity():
    assert np.allclose(so3_exp([0, 0, 0]), [1, 0, 0, 0], atol=0)


def test_so3_exp_half_turn_about_z():
    q = so3_exp([0, 0, np.pi])
    assert abs(q[0]) < 1e-12 and abs(abs(q[3]) - 1.0) < 1e-12


def test_so3_exp_matches_rodrigues(rng):
    for _ in range(50):
        w = rng.normal(size=3)
        w *= 0.3 / np.linalg.norm(w)
        assert np.abs(quat_to_rotmat(so3_exp(w)) - rodrigues(w)).max() < 1e-10


def test_so3_exp_small_angle_branch():
    w = np.array([3e-7, -2e-7, 1e-7])
    assert np.abs(quat_to_rotmat(so3_exp(w)) - (np.eye(3) + np.array(
        [[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]]))).max() < 1e-12


def test_so3_log_examples():
    assert np.allclose(so3_log([1, 0, 0, 0]), 0.0, atol=0)
    assert np.abs(so3_log(so3_exp([0.1, 0, 0])) - [0.1, 0, 0]).max() < 1e-10


def test_so3_log_pi_branch_deterministic():
    a = so3_log(so3_exp([0, 0, np.pi]))
    b = so3_log(so3_exp([0, 0, -np.pi]))
    assert np.allclose(a, b) and np.isclose(np.linalg.norm(a), np.pi)


def test_exp_log_roundtrip_sweep():
    rng = np.random.default_rng(7)
    w = rng.normal(size=(10_000, 3))
    w *= (rng.uniform(0, np.pi - 1e-3, size=10_000) / np.linalg.norm(w, axis=1))[:, None]
    err = max(np.abs(so3_log(so3_exp(x)) - x).max() for x in w)
    assert err < 1e-8


def test_transform_point_examples():
    assert np.allclose(transform_point(Pose3.identity(), [1, 2, 3]), [1, 2, 3])
    assert np.allclose(transform_point(Pose3(t=[0, 0, 5]), [0, 0, 0]), [0, 0, 5])
    T = Pose3(so3_exp([0, 0, np.pi / 2]), [1, 0, 0])
    assert np.abs(transform_point(T, [1, 0, 0]) - [1, 1, 0]).max() < 1e-12


def test_frame_mismatch_raises():
    a = Pose3(frames=(FrameTag.WORLD, FrameTag.BODY))
    b = Pose3(frames=(FrameTag.CAMERA, FrameTag.SONAR))
    with pytest.raises(FrameMismatch):
        a @ b
    c = Pose3(frames=(FrameTag.BODY, FrameTag.CAMERA))
    assert (a @ c).frames == (FrameTag.WORLD, FrameTag.CAMERA)
    with pytest.raises(FrameMismatch):
        a.transform_point([0, 0, 0], FrameTag.CAMERA)


def test_world_constants_validation():
    w = WorldConstants()
    assert w.gravity[2] < 0
    assert 20 <= np.linalg.norm(w.geomagnetic_field_world) <= 70
    with pytest.raises(ValueError):
        WorldConstants(gravity=np.array([0, 0, 9.81]))


def test_right_jacobian_inverse_pair(rng):
    for _ in range(20):
        phi = rng.normal(size=3)
        assert np.allclose(right_jacobian(phi) @ right_jacobian_inv(phi), np.eye(3), atol=1e-10)


def test_right_jacobian_first_order(rng):
    phi = rng.normal(size=3) * 0.5
    d = rng.normal(size=3) * 1e-6
    lhs = exp_rotmat(phi + d)
    rhs = exp_rotmat(phi) @ exp_rotmat(right_jacobian(phi) @ d)
    assert np.abs(lhs - rhs).max() < 1e-11


@given(vec3)
def test_quaternion_normalized(w):
    q = so3_exp(w)
    assert abs(np.linalg.norm(q) - 1.0) < 1e-9
    assert abs(np.linalg.norm(quat_normalize(3.7 * q)) - 1.0) < 1e-9


@given(vec3, vec3)
def test_quat_product_matches_matrix_product(a, b):
    qa, qb = so3_exp(a), so3_exp(b)
    assert np.allclose(quat_to_rotmat(quat_mul(qa, qb)), quat_to_rotmat(qa) @ quat_to_rotmat(qb), atol=1e-12)


@given(vec3, vec3)
def test_rotation_preserves_norm(w, v):
    assert abs(np.linalg.norm(quat_rotate(so3_exp(w), v)) - np.linalg.norm(v)) < 1e-9


@given(vec3)
def test_rotmat_quat_roundtrip(w):
    R = exp_rotmat(w)
    assert np.allclose(quat_to_rotmat(rotmat_to_quat(R)), R, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_pose_group_axioms(seed):
    rng = np.random.default_rng(seed)
    A, B, C = (Pose3.from_rt(random_rotation(rng), rng.normal(size=3) * 10) for _ in range(3))
    assert ((A @ B) @ C).almost_equal(A @ (B @ C), 1e-9)
    assert (A @ A.inverse()).almost_equal(Pose3.identity(), 1e-9)
    p, q = rng.normal(size=3), rng.normal(size=3)
    assert abs(np.linalg.norm(A.transform_point(p) - A.transform_point(q)) - np.linalg.norm(p - q)) < 1e-9


@given(st.integers(0, 2**32 - 1))
def test_log_exp_inverse_on_ball(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=3)
    w *= rng.uniform(0, np.pi - 1e-3) / np.linalg.norm(w)
    assert np.abs(log_rotmat(exp_rotmat(w)) - w).max() < 1e-9
