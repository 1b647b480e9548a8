"""Finite-difference checks of every hand-derived residual Jacobian.

Each ``check_*`` draws ``n`` random configurations and returns the worst
relative error ``|J - J_fd| / |J_fd|`` (Frobenius, per Jacobian block).
"""

import numpy as np

from conftest import fd_jacobian, random_rotation, rel_err
from vims.geometry import Pose3, exp_rotmat, rpy_rotmat
from vims.measurements import ImuStream
from vims.pose_graph import loop_residual, magnetometer_residual
from vims.preprocessing import preintegrate
from vims.sim.world import Extrinsics, SensorNoiseSpec
from vims.vio import NavState, preintegration_residual, reprojection_residual, sonar_altitude_residual

EXT = Extrinsics()
H = 1e-6


def _state(rng, p=None, R=None) -> NavState:
    p = rng.normal(0, 3, 3) if p is None else p
    R = random_rotation(rng) if R is None else R
    return NavState(0.0, p, R, rng.normal(0, 0.3, 3), rng.normal(0, 0.05, 3), rng.normal(0, 0.01, 3))


def _nav_retract(s: NavState, d6):
    dx = np.zeros(15)
    dx[:6] = d6
    return s.retract(dx)


def _downward_pair(rng):
    """Anchor and target keyframes over a flat floor with a landmark both can see."""
    while True:
        a = _state(rng, np.r_[rng.uniform(-2, 2, 2), rng.uniform(1.5, 3.0)],
                   rpy_rotmat(*rng.normal(0, 0.1, 2), rng.uniform(-np.pi, np.pi)))
        b = _state(rng, a.p + rng.normal(0, 0.3, 3), a.R @ rpy_rotmat(*rng.normal(0, 0.1, 3)))
        Twc = a.pose @ EXT.body_from_camera
        ray = np.r_[rng.uniform(-0.4, 0.4, 2), 1.0]
        ray /= np.linalg.norm(ray)
        depth = rng.uniform(1.0, 4.0)
        f = Twc.transform_point(depth * ray)
        pc = (b.pose @ EXT.body_from_camera).inverse().transform_point(f)
        if pc[2] > 0.5:
            return a, b, ray, depth, pc[:2] / pc[2] + rng.normal(0, 0.01, 2)


def check_reprojection(n=100, seed=0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        a, b, ray, depth, uv = _downward_pair(rng)
        _, Ja, Jt, Jl = reprojection_residual(a, b, ray, depth, uv, EXT, jacobians=True)
        fa = fd_jacobian(lambda s: reprojection_residual(s, b, ray, depth, uv, EXT), a, _nav_retract, 6, H)
        ft = fd_jacobian(lambda s: reprojection_residual(a, s, ray, depth, uv, EXT), b, _nav_retract, 6, H)
        fl = fd_jacobian(lambda d: reprojection_residual(a, b, ray, d, uv, EXT), depth, lambda x, d: x + d[0], 1, H)[:, 0]
        worst = max(worst, rel_err(Ja, fa), rel_err(Jt, ft), rel_err(Jl, fl))
    return worst


def check_sonar(n=100, seed=1) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        a, s, ray, depth, _ = _downward_pair(rng)
        rng_ = rng.uniform(1.0, 3.0)
        _, Js, Ja, Jl = sonar_altitude_residual(s, rng_, a, ray, depth, EXT, jacobians=True)
        fs = fd_jacobian(lambda x: sonar_altitude_residual(x, rng_, a, ray, depth, EXT), s, _nav_retract, 6, H)
        fa = fd_jacobian(lambda x: sonar_altitude_residual(s, rng_, x, ray, depth, EXT), a, _nav_retract, 6, H)
        fl = fd_jacobian(lambda d: sonar_altitude_residual(s, rng_, a, ray, d, EXT), depth, lambda x, d: x + d[0], 1, H)[0]
        worst = max(worst, rel_err(Js, fs), rel_err(Ja, fa), rel_err(np.atleast_1d(Jl), np.atleast_1d(fl)))
    return worst


def check_preintegration(n=100, seed=2) -> float:
    rng = np.random.default_rng(seed)
    noise = SensorNoiseSpec()
    g = np.array([0.0, 0.0, -9.81])
    worst = 0.0
    for _ in range(n):
        m = 21
        t = np.cumsum(np.r_[0.0, rng.uniform(0.004, 0.006, m - 1)])
        imu = ImuStream(t, rng.normal(0, 0.5, (m, 3)) + [0, 0, 9.81], rng.normal(0, 0.3, (m, 3)))
        si = _state(rng)
        pre = preintegrate(imu, si.ba + rng.normal(0, 0.01, 3), si.bg + rng.normal(0, 0.003, 3), noise)
        sj = _state(rng)
        _, Ji, Jj = preintegration_residual(si, sj, pre, g, jacobians=True)
        fi = fd_jacobian(lambda x: preintegration_residual(x, sj, pre, g), si, NavState.retract, 15, H)
        fj = fd_jacobian(lambda x: preintegration_residual(si, x, pre, g), sj, NavState.retract, 15, H)
        worst = max(worst, rel_err(Ji, fi), rel_err(Jj, fj))
    return worst


def check_magnetometer(n=100, seed=3) -> float:
    rng = np.random.default_rng(seed)
    b = np.array([0.0, 30.0, -40.0])
    worst = 0.0
    for _ in range(n):
        R = random_rotation(rng)
        z = R.T @ b + rng.normal(0, 1.0, 3)
        _, J = magnetometer_residual(R, z, b, jacobian=True)
        fd = fd_jacobian(lambda X: magnetometer_residual(X, z, b), R,
                         lambda X, d: X @ exp_rotmat(d), 3, H)
        worst = max(worst, rel_err(J, fd))
    return worst


def check_loop(n=100, seed=4) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0

    def retract(T, d):
        return T.retract(d[:3], d[3:])

    for _ in range(n):
        Ti = Pose3.from_rt(random_rotation(rng), rng.normal(0, 5, 3))
        Tj = Pose3.from_rt(random_rotation(rng), rng.normal(0, 5, 3))
        rel = Ti.inverse() @ Tj
        z = rel.retract(rng.normal(0, 0.3, 3), rng.normal(0, 0.3, 3))
        _, Ji, Jj = loop_residual(Ti, Tj, z, jacobian=True)
        fi = fd_jacobian(lambda T: loop_residual(T, Tj, z), Ti, retract, 6, H)
        fj = fd_jacobian(lambda T: loop_residual(Ti, T, z), Tj, retract, 6, H)
        worst = max(worst, rel_err(Ji, fi), rel_err(Jj, fj))
    return worst


CHECKS = {
    "preintegration": check_preintegration,
    "reprojection": check_reprojection,
    "sonar altitude": check_sonar,
    "magnetometer": check_magnetometer,
    "loop": check_loop,
}
