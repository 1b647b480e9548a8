"""Sliding-window visual-inertial odometry with direct feature depth and
single-beam sonar altitude residuals.

States live in a gravity-aligned local frame whose yaw is fixed by the first
keyframe. Every keyframe carries ``(p, R, v, b_a, b_g)``; features are stored
as a metric distance ``lam`` along the unit ray of their first observation
(the anchor). Residual blocks:

* IMU preintegration between consecutive keyframes (15-dim),
* reprojection of every non-anchor observation (Huber),
* sonar altitude: the seafloor point hit by the beam and every feature seen
  in the same keyframe share the same height (Huber),
* a prior re-anchoring the oldest state.

The window is solved with Levenberg-Marquardt on dense normal equations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from vims.geometry import Pose3, exp_rotmat, log_rotmat, right_jacobian, right_jacobian_inv, skew
from vims.measurements import FrameObservation, ImuStream, SonarSample
from vims.preprocessing import BA, BG, TH, P, V, PreintegratedImu, SonarMedianFilter, preintegrate
from vims.sim.world import Extrinsics, SensorNoiseSpec

log = logging.getLogger(__name__)

E3 = np.array([0.0, 0.0, 1.0])


class EstimatorFailure(RuntimeError):
    """The odometry cannot produce a trustworthy estimate."""


class WindowDiverged(RuntimeError):
    pass


@dataclass
class VioConfig:
    window_size: int = 10  # n; the window holds n + 1 keyframes
    keyframe_interval: float = 0.5
    parallax_threshold: float = 0.08  # mean normalized-plane displacement
    depth_min: float = 0.3
    depth_max: float = 15.0
    huber_delta: float = 1.5
    pixel_sigma: float = 0.003
    sonar_sigma: float = 0.05
    sonar_half_width: int = 2
    sonar_association: float = 0.1
    use_sonar: bool = True
    max_iterations: int = 50
    rel_tol: float = 1e-6
    abs_tol: float = 1e-3  # cost units (half chi-square); smaller decreases are noise
    grad_tol: float = 1e-8
    max_rejections: int = 5
    init_time: float = 0.5  # IMU averaged for gravity alignment
    excitation_window: float = 3.0
    min_excitation: float = 0.1  # m/s^2 RMS gravity-free acceleration when sonar is off
    default_depth: float = 5.0
    prior_sigma_p: float = 1e-3
    prior_sigma_theta: float = 1e-3
    prior_sigma_v: float = 0.1
    prior_sigma_ba: float = 0.02
    prior_sigma_bg: float = 0.002
    init_sigma_v: float = 1.0
    init_sigma_tilt: float = 0.02
    repropagate_ba: float = 0.05
    repropagate_bg: float = 0.005


@dataclass
class NavState:
    t: float
    p: np.ndarray
    R: np.ndarray  # local <- body
    v: np.ndarray
    ba: np.ndarray
    bg: np.ndarray
    kf_id: int = 0

    @property
    def q(self) -> np.ndarray:
        return self.pose.q

    @property
    def pose(self) -> Pose3:
        return Pose3.from_rt(self.R, self.p)

    def copy(self) -> "NavState":
        return NavState(self.t, self.p.copy(), self.R.copy(), self.v.copy(), self.ba.copy(), self.bg.copy(), self.kf_id)

    def retract(self, dx: np.ndarray) -> "NavState":
        return NavState(self.t, self.p + dx[P], self.R @ exp_rotmat(dx[TH]), self.v + dx[V],
                        self.ba + dx[BA], self.bg + dx[BG], self.kf_id)


@dataclass
class FeatureTrack:
    feature_id: int
    anchor: int  # keyframe id
    ray: np.ndarray  # unit bearing in the anchor camera frame
    depth: float
    observations: dict[int, np.ndarray] = field(default_factory=dict)  # kf id -> normalized uv
    sonar_constrained: bool = False


@dataclass
class VioEdge:
    i: int
    j: int
    relative: Pose3
    information: np.ndarray
    t_i: float = 0.0
    t_j: float = 0.0


@dataclass
class KeyframeRecord:
    """A keyframe leaving the window, with everything the back end needs."""

    kf_id: int
    t: float
    pose_local: Pose3
    observation: FrameObservation
    points_local: dict[int, np.ndarray]  # feature id -> 3-D point in the local frame
    state: NavState | None = None
    window_points: dict[int, np.ndarray] | None = None  # every active track of the window at emission


# --------------------------------------------------------------------------
# residuals
# --------------------------------------------------------------------------

def bearing(uv) -> np.ndarray:
    uv = np.asarray(uv, dtype=float)
    b = np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)
    return b / np.linalg.norm(b, axis=-1, keepdims=True)


def feature_in_local_frame(anchor: NavState, ray, depth: float, ext: Extrinsics) -> np.ndarray:
    """Anchor camera point ``depth * ray`` chained camera -> body -> local."""
    Tbc = ext.body_from_camera
    xb = Tbc.R @ (depth * np.asarray(ray, dtype=float)) + Tbc.t
    return anchor.R @ xb + anchor.p


def reprojection_residual(anchor: NavState, target: NavState, ray, depth: float, uv, ext: Extrinsics,
                          jacobians: bool = False):
    """Predicted minus measured normalized coordinates in ``target``.

    With ``jacobians`` also returns d r / d(anchor p, theta), d r / d(target
    p, theta) (each 2x6) and d r / d depth (2,). Returns None when the point
    is behind the camera.
    """
    Tbc = ext.body_from_camera
    Rbc, pbc = Tbc.R, Tbc.t
    ray = np.asarray(ray, dtype=float)
    xa = Rbc @ (depth * ray) + pbc
    f = anchor.R @ xa + anchor.p
    pb = target.R.T @ (f - target.p)
    pc = Rbc.T @ (pb - pbc)
    if pc[2] <= 1e-6:
        return None
    r = pc[:2] / pc[2] - np.asarray(uv, dtype=float)
    if not jacobians:
        return r
    z = pc[2]
    dproj = np.array([[1.0 / z, 0.0, -pc[0] / z ** 2], [0.0, 1.0 / z, -pc[1] / z ** 2]])
    A = dproj @ Rbc.T @ target.R.T
    Ja = np.hstack([A, A @ (-anchor.R @ skew(xa))])
    Jt = np.hstack([-A, dproj @ Rbc.T @ skew(pb)])
    Jl = A @ (anchor.R @ Rbc @ ray)
    if anchor is target:
        Ja = Ja + Jt
        Jt = Ja
    return r, Ja, Jt, Jl


def sonar_seafloor_point(state: NavState, range_: float, ext: Extrinsics) -> np.ndarray:
    """Beam/seafloor intersection ``T_l<-b T_b<-s [0, 0, d]`` in the local frame."""
    Tbs = ext.body_from_sonar
    y = Tbs.R @ np.array([0.0, 0.0, range_]) + Tbs.t
    return state.R @ y + state.p


def sonar_altitude_residual(state: NavState, range_: float, anchor: NavState, ray, depth: float,
                            ext: Extrinsics, jacobians: bool = False):
    """Height of the sonar seafloor point minus height of the feature.

    Jacobians: d r / d(state p, theta), d r / d(anchor p, theta) (each 6,),
    d r / d depth. The residual is affine in ``depth``.
    """
    Tbs, Tbc = ext.body_from_sonar, ext.body_from_camera
    y = Tbs.R @ np.array([0.0, 0.0, range_]) + Tbs.t
    ray = np.asarray(ray, dtype=float)
    xa = Tbc.R @ (depth * ray) + Tbc.t
    r = (state.R @ y + state.p)[2] - (anchor.R @ xa + anchor.p)[2]
    if not jacobians:
        return r
    Js = np.concatenate([E3, -(state.R @ skew(y))[2]])
    Ja = np.concatenate([-E3, (anchor.R @ skew(xa))[2]])
    Jl = -(anchor.R @ Tbc.R @ ray)[2]
    return r, Js, Ja, Jl


def preintegration_residual(si: NavState, sj: NavState, pre: PreintegratedImu, gravity,
                            jacobians: bool = False):
    """15-dim residual (p, theta, v, b_a, b_g) and its 15x15 Jacobians."""
    g = np.asarray(gravity, dtype=float)
    dt = pre.dt_total
    dba = si.ba - pre.bias_acc
    dbg = si.bg - pre.bias_gyro
    dp, dv, dR = pre.corrected(si.ba, si.bg)
    RiT = si.R.T
    dpw = sj.p - si.p - si.v * dt - 0.5 * g * dt * dt
    dvw = sj.v - si.v - g * dt
    r = np.empty(15)
    r[P] = RiT @ dpw - dp
    rth = log_rotmat(dR.T @ RiT @ sj.R)
    r[TH] = rth
    r[V] = RiT @ dvw - dv
    r[BA] = sj.ba - si.ba
    r[BG] = sj.bg - si.bg
    if not jacobians:
        return r
    Ji = np.zeros((15, 15))
    Jj = np.zeros((15, 15))
    Jrinv = right_jacobian_inv(rth)
    Ji[P, P] = -RiT
    Ji[P, TH] = skew(RiT @ dpw)
    Ji[P, V] = -RiT * dt
    Ji[P, BA] = -pre.dp_dba
    Ji[P, BG] = -pre.dp_dbg
    Jj[P, P] = RiT
    Ji[TH, TH] = -Jrinv @ sj.R.T @ si.R
    Ji[TH, BG] = -Jrinv @ exp_rotmat(rth).T @ right_jacobian(pre.dR_dbg @ dbg) @ pre.dR_dbg
    Jj[TH, TH] = Jrinv
    Ji[V, TH] = skew(RiT @ dvw)
    Ji[V, V] = -RiT
    Ji[V, BA] = -pre.dv_dba
    Ji[V, BG] = -pre.dv_dbg
    Jj[V, V] = RiT
    Ji[BA, BA] = -np.eye(3)
    Jj[BA, BA] = np.eye(3)
    Ji[BG, BG] = -np.eye(3)
    Jj[BG, BG] = np.eye(3)
    del dba
    return r, Ji, Jj


def _sqrt_info(cov: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Upper-triangular ``L^T`` with ``L^T L = cov^-1``."""
    w, U = np.linalg.eigh(0.5 * (cov + cov.T))
    w = np.maximum(w, floor)
    return (U / np.sqrt(w)).T


def huber_weight(norm: np.ndarray, delta: float) -> np.ndarray:
    return np.where(norm <= delta, 1.0, delta / np.maximum(norm, 1e-300))


def huber_cost(norm: np.ndarray, delta: float) -> np.ndarray:
    return np.where(norm <= delta, 0.5 * norm ** 2, delta * (norm - 0.5 * delta))


# --------------------------------------------------------------------------
# window
# --------------------------------------------------------------------------

@dataclass
class SlidingWindow:
    states: list[NavState] = field(default_factory=list)
    preints: list[PreintegratedImu] = field(default_factory=list)
    tracks: dict[int, FeatureTrack] = field(default_factory=dict)
    sonar: dict[int, float] = field(default_factory=dict)  # kf id -> filtered range
    prior: NavState | None = None
    prior_sigmas: np.ndarray = field(default_factory=lambda: np.ones(15))

    def index_of(self, kf_id: int) -> int:
        for i, s in enumerate(self.states):
            if s.kf_id == kf_id:
                return i
        raise KeyError(kf_id)

    def state(self, kf_id: int) -> NavState:
        return self.states[self.index_of(kf_id)]

    def active_tracks(self) -> list[FeatureTrack]:
        ids = {s.kf_id for s in self.states}
        return [tr for tr in self.tracks.values()
                if tr.anchor in ids and sum(k in ids for k in tr.observations) >= 2]

    def point(self, track: FeatureTrack, ext: Extrinsics) -> np.ndarray:
        return feature_in_local_frame(self.state(track.anchor), track.ray, track.depth, ext)


@dataclass
class SolveStats:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    costs: list[float]


class WindowProblem:
    """Vectorised residual/Jacobian assembly for one window."""

    def __init__(self, window: SlidingWindow, cfg: VioConfig, ext: Extrinsics, gravity):
        self.w = window
        self.cfg = cfg
        self.ext = ext
        self.g = np.asarray(gravity, dtype=float)
        self.tracks = window.active_tracks()
        self.S = len(window.states)
        self.nx = 15 * self.S + len(self.tracks)
        idx = {s.kf_id: i for i, s in enumerate(window.states)}
        self.kf_index = idx
        obs_t, obs_a, obs_i, obs_uv = [], [], [], []
        son_t, son_a, son_k, son_r = [], [], [], []
        for j, tr in enumerate(self.tracks):
            a = idx[tr.anchor]
            for kf, uv in tr.observations.items():
                if kf not in idx:
                    continue
                k = idx[kf]
                if kf != tr.anchor:
                    obs_t.append(j)
                    obs_a.append(a)
                    obs_i.append(k)
                    obs_uv.append(uv)
                if cfg.use_sonar and kf in window.sonar:
                    son_t.append(j)
                    son_a.append(a)
                    son_k.append(k)
                    son_r.append(window.sonar[kf])
        self.obs_t = np.array(obs_t, dtype=int)
        self.obs_a = np.array(obs_a, dtype=int)
        self.obs_i = np.array(obs_i, dtype=int)
        self.obs_uv = np.array(obs_uv, dtype=float).reshape(-1, 2)
        self.son_t = np.array(son_t, dtype=int)
        self.son_a = np.array(son_a, dtype=int)
        self.son_k = np.array(son_k, dtype=int)
        self.son_r = np.array(son_r, dtype=float)
        self.rays = np.array([tr.ray for tr in self.tracks]).reshape(-1, 3)
        self.pre_sqrt = [_sqrt_info(pre.covariance + np.eye(15) * 1e-12) for pre in window.preints]

    # ---- state packing
    def unpack(self, states, depths):
        R = np.array([s.R for s in states])
        p = np.array([s.p for s in states])
        return R, p, np.asarray(depths, dtype=float)

    def current_depths(self):
        return np.array([tr.depth for tr in self.tracks])

    def apply(self, states, depths, dx):
        new_states = [s.retract(dx[15 * i:15 * i + 15]) for i, s in enumerate(states)]
        nd = np.clip(depths + dx[15 * self.S:], self.cfg.depth_min, self.cfg.depth_max)
        return new_states, nd

    # ---- residual evaluation
    def evaluate(self, states, depths, jacobians: bool):
        cfg, ext = self.cfg, self.ext
        R, p, lam = self.unpack(states, depths)
        Rbc, pbc = ext.body_from_camera.R, ext.body_from_camera.t
        cost = 0.0
        blocks = []

        # prior on the oldest state
        if self.w.prior is not None:
            s0, pr = states[0], self.w.prior
            rp = np.concatenate([s0.p - pr.p, log_rotmat(pr.R.T @ s0.R), s0.v - pr.v, s0.ba - pr.ba, s0.bg - pr.bg])
            W = 1.0 / self.w.prior_sigmas
            r = W * rp
            cost += 0.5 * r @ r
            if jacobians:
                J = np.diag(W)
                J[TH, TH] = W[TH, None] * right_jacobian_inv(rp[TH])
                blocks.append((r, [(0, J)]))
            else:
                blocks.append((r, None))

        # IMU
        for k, pre in enumerate(self.w.preints):
            out = preintegration_residual(states[k], states[k + 1], pre, self.g, jacobians)
            L = self.pre_sqrt[k]
            if jacobians:
                r, Ji, Jj = out
                r = L @ r
                blocks.append((r, [(15 * k, L @ Ji), (15 * (k + 1), L @ Jj)]))
            else:
                r = L @ out
                blocks.append((r, None))
            cost += 0.5 * r @ r

        # reprojection, vectorised
        n = len(self.obs_t)
        vis_r = np.zeros((0, 2))
        if n:
            a, i, j = self.obs_a, self.obs_i, self.obs_t
            ray = self.rays[j]
            xa = (lam[j, None] * ray) @ Rbc.T + pbc
            f = np.einsum("nij,nj->ni", R[a], xa) + p[a]
            pb = np.einsum("nji,nj->ni", R[i], f - p[i])
            pc = (pb - pbc) @ Rbc
            z = pc[:, 2]
            valid = z > 1e-6
            if not np.all(valid):
                log.debug("dropping %d observations behind the camera", int(np.sum(~valid)))
            zs = np.where(valid, z, 1.0)
            res = pc[:, :2] / zs[:, None] - self.obs_uv
            res[~valid] = 0.0
            wr = res / cfg.pixel_sigma
            nrm = np.linalg.norm(wr, axis=1)
            cost += float(np.sum(huber_cost(nrm, cfg.huber_delta)[valid]))
            sw = np.sqrt(huber_weight(nrm, cfg.huber_delta)) * valid / cfg.pixel_sigma
            vis_r = res * sw[:, None]
            if jacobians:
                dproj = np.zeros((n, 2, 3))
                dproj[:, 0, 0] = 1.0 / zs
                dproj[:, 1, 1] = 1.0 / zs
                dproj[:, 0, 2] = -pc[:, 0] / zs ** 2
                dproj[:, 1, 2] = -pc[:, 1] / zs ** 2
                A = dproj @ Rbc.T @ np.transpose(R[i], (0, 2, 1))  # n,2,3
                Ja_th = -np.einsum("nij,njk->nik", A @ R[a], _skew_batch(xa))
                Jt_th = np.einsum("nij,njk->nik", dproj @ Rbc.T, _skew_batch(pb))
                Jl = np.einsum("nij,nj->ni", A @ R[a], ray @ Rbc.T)
                self._vis_jac = (A * sw[:, None, None], Ja_th * sw[:, None, None],
                                 Jt_th * sw[:, None, None], Jl * sw[:, None])

        # sonar altitude
        m = len(self.son_t)
        son_r = np.zeros(0)
        if m:
            Tbs = ext.body_from_sonar
            y = self.son_r[:, None] * Tbs.R[:, 2] + Tbs.t
            k, a, j = self.son_k, self.son_a, self.son_t
            ray = self.rays[j]
            xa = (lam[j, None] * ray) @ Rbc.T + pbc
            hz = np.einsum("nj,nj->n", R[k][:, 2, :], y) + p[k][:, 2]
            fz = np.einsum("nj,nj->n", R[a][:, 2, :], xa) + p[a][:, 2]
            res = (hz - fz) / cfg.sonar_sigma
            nrm = np.abs(res)
            cost += float(np.sum(huber_cost(nrm, cfg.huber_delta)))
            sw = np.sqrt(huber_weight(nrm, cfg.huber_delta)) / cfg.sonar_sigma
            son_r = (hz - fz) * sw
            if jacobians:
                Js_th = -np.einsum("nj,njk->nk", R[k][:, 2, :], _skew_batch(y))
                Ja_th = np.einsum("nj,njk->nk", R[a][:, 2, :], _skew_batch(xa))
                Jl = -np.einsum("nj,nj->n", R[a][:, 2, :], ray @ Rbc.T)
                self._son_jac = (sw, Js_th * sw[:, None], Ja_th * sw[:, None], Jl * sw)

        r_all = np.concatenate([b[0] for b in blocks] + [vis_r.ravel(), son_r])
        if not jacobians:
            return cost, r_all, None
        J = np.zeros((len(r_all), self.nx))
        row = 0
        for r, parts in blocks:
            for c0, Jb in parts:
                J[row:row + len(r), c0:c0 + 15] += Jb
            row += len(r)
        if n:
            A, Ja_th, Jt_th, Jl = self._vis_jac
            rows = row + 2 * np.arange(n)
            a, i, j = self.obs_a, self.obs_i, self.obs_t
            for d in range(2):
                rr = rows + d
                for c in range(3):
                    np.add.at(J, (rr, 15 * a + c), A[:, d, c])
                    np.add.at(J, (rr, 15 * a + 3 + c), Ja_th[:, d, c])
                    np.add.at(J, (rr, 15 * i + c), -A[:, d, c])
                    np.add.at(J, (rr, 15 * i + 3 + c), Jt_th[:, d, c])
                np.add.at(J, (rr, 15 * self.S + j), Jl[:, d])
            row += 2 * n
        if m:
            sw, Js_th, Ja_th, Jl = self._son_jac
            rr = row + np.arange(m)
            k, a, j = self.son_k, self.son_a, self.son_t
            np.add.at(J, (rr, 15 * k + 2), sw)
            np.add.at(J, (rr, 15 * a + 2), -sw)
            for c in range(3):
                np.add.at(J, (rr, 15 * k + 3 + c), Js_th[:, c])
                np.add.at(J, (rr, 15 * a + 3 + c), Ja_th[:, c])
            np.add.at(J, (rr, 15 * self.S + j), Jl)
        return cost, r_all, J


def _skew_batch(v: np.ndarray) -> np.ndarray:
    K = np.zeros((len(v), 3, 3))
    K[:, 0, 1], K[:, 0, 2], K[:, 1, 2] = -v[:, 2], v[:, 1], -v[:, 0]
    K[:, 1, 0], K[:, 2, 0], K[:, 2, 1] = v[:, 2], -v[:, 1], v[:, 0]
    return K


def optimize_window(window: SlidingWindow, cfg: VioConfig, ext: Extrinsics, gravity) -> tuple[SolveStats, np.ndarray | None, WindowProblem]:
    """Levenberg-Marquardt over the window, updating it in place.

    Returns solver statistics, the Gauss-Newton Hessian at the solution and
    the problem (for variable bookkeeping). Raises ``WindowDiverged`` after
    ``max_rejections`` consecutive rejected steps with a cost above the
    starting cost.
    """
    prob = WindowProblem(window, cfg, ext, gravity)
    states = [s.copy() for s in window.states]
    depths = prob.current_depths()
    cost, r, J = prob.evaluate(states, depths, True)
    costs = [cost]
    mu = 1e-8
    rejections = 0
    it = 0
    converged = False
    H = J.T @ J
    while it < cfg.max_iterations:
        it += 1
        g = J.T @ r
        if np.max(np.abs(g)) < cfg.grad_tol:
            converged = True
            break
        D = np.diag(H).copy()
        D = np.maximum(D, 1e-9)
        try:
            dx = -np.linalg.solve(H + mu * np.diag(D), g)
        except np.linalg.LinAlgError:
            mu *= 10.0
            continue
        ns, nd = prob.apply(states, depths, dx)
        # steps are mostly accepted, so linearise at the trial point right away
        new_cost, new_r, new_J = prob.evaluate(ns, nd, True)
        if new_cost < cost:
            rel = (cost - new_cost) / max(cost, 1e-300)
            states, depths, cost, r, J = ns, nd, new_cost, new_r, new_J
            costs.append(cost)
            H = J.T @ J
            mu = max(mu / 10.0, 1e-15)
            rejections = 0
            if rel < cfg.rel_tol or costs[-2] - cost < cfg.abs_tol:
                converged = True
                break
        else:
            rejections += 1
            mu *= 10.0
            if rejections >= cfg.max_rejections:
                if cost > costs[0] * (1 + 1e-9):
                    raise WindowDiverged("window solver diverged")
                converged = True
                break
    for s_old, s_new in zip(window.states, states):
        s_old.p, s_old.R, s_old.v, s_old.ba, s_old.bg = s_new.p, s_new.R, s_new.v, s_new.ba, s_new.bg
    for tr, d in zip(prob.tracks, depths):
        tr.depth = float(d)
    return SolveStats(it, costs[0], cost, converged, costs), H, prob


def schur_pose_information(H: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Schur complement of ``H`` onto the variables in ``keep``."""
    mask = np.zeros(H.shape[0], dtype=bool)
    mask[keep] = True
    Hkk = H[np.ix_(mask, mask)]
    if mask.all():
        return Hkk
    Hkm = H[np.ix_(mask, ~mask)]
    Hmm = H[np.ix_(~mask, ~mask)]
    Hmm = Hmm + np.eye(len(Hmm)) * 1e-9 * max(1.0, np.max(np.abs(np.diag(Hmm))))
    return Hkk - Hkm @ np.linalg.solve(Hmm, Hkm.T)


# --------------------------------------------------------------------------
# estimator
# --------------------------------------------------------------------------

class VioEstimator:
    """Streaming front end: push IMU, sonar and frames in time order."""

    def __init__(self, cfg: VioConfig, noise: SensorNoiseSpec, ext: Extrinsics, gravity):
        self.cfg = cfg
        self.noise = noise
        self.ext = ext
        self.g = np.asarray(gravity, dtype=float)
        self.window = SlidingWindow()
        self._imu_t: list[float] = []
        self._imu_a: list[np.ndarray] = []
        self._imu_w: list[np.ndarray] = []
        self._sonar_filter = SonarMedianFilter(cfg.sonar_half_width)
        self._sonar_t: list[float] = []
        self._sonar_r: list[float] = []
        self._raw_sonar: list[SonarSample] = []
        self._observations: dict[int, FrameObservation] = {}
        self._next_kf = 0
        self._last_kf_t = -np.inf
        self._last_kf_obs: FrameObservation | None = None
        self.initialized = False
        self.edges: list[VioEdge] = []
        self.records: list[KeyframeRecord] = []
        self.solve_log: list[SolveStats] = []
        self.floor_z: float | None = None
        self._prop_cache = None
        self._corr = Pose3.identity()

    # ---- input
    def push_imu(self, t: float, acc, gyro):
        self._imu_t.append(float(t))
        self._imu_a.append(np.asarray(acc, dtype=float))
        self._imu_w.append(np.asarray(gyro, dtype=float))

    def push_sonar(self, sample: SonarSample):
        self._raw_sonar.append(sample)
        for s in self._sonar_filter.push(sample):
            self._sonar_t.append(s.t)
            self._sonar_r.append(s.range)

    def push_frame(self, obs: FrameObservation) -> list:
        """Returns emitted items: ``("pose", t, Pose3)`` for every frame once
        initialised, and ``("edge", VioEdge, KeyframeRecord_i, KeyframeRecord_j)``
        whenever the window slides."""
        out: list = []
        if not self.initialized:
            if obs.t + 1e-9 < self.cfg.init_time:
                return out
            self._initialize(obs)
            if self.initialized:
                out.append(("pose", obs.t, self.window.states[-1].pose))
            return out
        if self._is_keyframe(obs):
            out.extend(self._add_keyframe(obs))
        pose = self._propagate_pose(obs.t)
        out.append(("pose", obs.t, pose))
        return out

    def finish(self) -> list:
        """Emit all keyframes still in the window."""
        out = []
        while len(self.window.states) >= 2:
            self._solve()
            out.extend(self._slide(final=True))
        return out

    # ---- helpers
    def _imu_between(self, t0: float, t1: float) -> ImuStream:
        t = np.asarray(self._imu_t)
        i0 = int(np.searchsorted(t, t0 - 1e-9))
        i1 = int(np.searchsorted(t, t1 + 1e-9, side="right"))
        return ImuStream(t[i0:i1], np.array(self._imu_a[i0:i1]).reshape(-1, 3), np.array(self._imu_w[i0:i1]).reshape(-1, 3))

    def _trim_imu(self, t_keep: float):
        t = np.asarray(self._imu_t)
        i = int(np.searchsorted(t, t_keep - 1e-9)) - 1
        if i > 0:
            del self._imu_t[:i], self._imu_a[:i], self._imu_w[:i]

    def _sonar_near(self, t: float) -> float | None:
        if not self._sonar_t:
            return None
        ts = np.asarray(self._sonar_t)
        i = int(np.argmin(np.abs(ts - t)))
        if abs(ts[i] - t) <= self.cfg.sonar_association + 1e-9:
            return self._sonar_r[i]
        return None

    def _raw_sonar_near(self, t: float) -> float | None:
        """Median of raw samples around ``t`` (used before filtered output exists)."""
        near = [s.range for s in self._raw_sonar if abs(s.t - t) <= 0.25]
        return float(np.sort(near)[(len(near) - 1) // 2]) if near else None

    def _is_keyframe(self, obs: FrameObservation) -> bool:
        if obs.t - self._last_kf_t >= self.cfg.keyframe_interval - 1e-9:
            return True
        last = self._last_kf_obs
        if last is None or len(obs) == 0:
            return False
        common, ia, ib = np.intersect1d(obs.ids, last.ids, return_indices=True)
        if len(common) == 0:
            return True
        par = np.mean(np.linalg.norm(obs.uv[ia] - last.uv[ib], axis=1))
        return par > self.cfg.parallax_threshold

    def _check_excitation(self, t_end: float):
        imu = self._imu_between(0.0, t_end)
        if len(imu) < 10:
            raise EstimatorFailure("not enough IMU data to initialise")
        n0 = max(2, int(np.searchsorted(imu.t, self.cfg.init_time)))
        R = _gravity_alignment(imu.acc[:n0].mean(axis=0))
        acc_w = np.empty((len(imu), 3))
        for k in range(len(imu)):
            acc_w[k] = R @ imu.acc[k] + self.g
            if k + 1 < len(imu):
                R = R @ exp_rotmat(imu.gyro[k] * (imu.t[k + 1] - imu.t[k]))
        excitation = float(np.sqrt(np.mean(np.sum((acc_w - acc_w.mean(axis=0)) ** 2, axis=1))))
        if excitation < self.cfg.min_excitation:
            raise EstimatorFailure(
                f"insufficient IMU excitation ({excitation:.3f} m/s^2 < {self.cfg.min_excitation}) "
                "to recover metric scale without sonar")

    def _initialize(self, obs: FrameObservation):
        imu = self._imu_between(0.0, obs.t)
        if len(imu) < 2:
            raise EstimatorFailure("no IMU data before the first frame")
        if not self.cfg.use_sonar:
            # defer: need an excitation window of IMU first
            if obs.t < self.cfg.excitation_window:
                return
            self._check_excitation(obs.t)
        R0 = _gravity_alignment(imu.acc.mean(axis=0))
        bg0 = np.zeros(3)
        s0 = NavState(obs.t, np.zeros(3), R0, np.zeros(3), np.zeros(3), bg0, self._next_kf)
        self.window.states.append(s0)
        self.window.prior = s0.copy()
        sig = np.concatenate([np.full(3, self.cfg.prior_sigma_p),
                              [self.cfg.init_sigma_tilt, self.cfg.init_sigma_tilt, self.cfg.prior_sigma_theta],
                              np.full(3, self.cfg.init_sigma_v), np.full(3, self.noise.accel_bias_init or 0.02),
                              np.full(3, self.noise.gyro_bias_init or 0.002)])
        self.window.prior_sigmas = np.maximum(sig, 1e-6)
        self._register_keyframe(s0, obs)
        self.initialized = True

    def _register_keyframe(self, state: NavState, obs: FrameObservation):
        kf = state.kf_id
        self._observations[kf] = obs
        self._next_kf += 1
        self._last_kf_t = obs.t
        self._last_kf_obs = obs
        if self.cfg.use_sonar:
            r = self._sonar_near(obs.t)
            if r is None:
                r0 = self._raw_sonar_near(obs.t)
                if r0 is not None:
                    self.floor_z = sonar_seafloor_point(state, r0, self.ext)[2]
            else:
                self.window.sonar[kf] = r
                self.floor_z = sonar_seafloor_point(state, r, self.ext)[2]
        for fid, uv in zip(obs.ids, obs.uv):
            fid = int(fid)
            tr = self.window.tracks.get(fid)
            if tr is None:
                ray = bearing(uv)
                self.window.tracks[fid] = FeatureTrack(fid, kf, ray, self._initial_depth(state, ray), {kf: uv.copy()})
            else:
                tr.observations[kf] = uv.copy()

    def _initial_depth(self, state: NavState, ray) -> float:
        Tbc = self.ext.body_from_camera
        d = state.R @ Tbc.R @ ray
        o = state.R @ Tbc.t + state.p
        if self.floor_z is not None and d[2] < -0.05:
            lam = (self.floor_z - o[2]) / d[2]
            return float(np.clip(lam, self.cfg.depth_min, self.cfg.depth_max))
        return self.cfg.default_depth

    def _predict(self, si: NavState, pre: PreintegratedImu, t: float, kf: int) -> NavState:
        dp, dv, dR = pre.corrected(si.ba, si.bg)
        dt = pre.dt_total
        return NavState(t, si.p + si.v * dt + 0.5 * self.g * dt * dt + si.R @ dp, si.R @ dR,
                        si.v + self.g * dt + si.R @ dv, si.ba.copy(), si.bg.copy(), kf)

    def _propagate_pose(self, t: float) -> Pose3:
        """Dead-reckon from the newest keyframe state (orientation output between keyframes).

        Successive calls continue from the last integrated IMU sample while the
        keyframe state is unchanged.
        """
        last = self.window.states[-1]
        if t <= last.t + 1e-9:
            return last.pose
        key = (last.kf_id, last.t, last.p.tobytes(), last.R.tobytes(), last.v.tobytes(), last.ba.tobytes(),
               last.bg.tobytes())
        cache = self._prop_cache
        if cache is not None and cache[0] == key and cache[1] <= t:
            t_start, R, p, v = cache[1:]
        else:
            t_start, R, p, v = last.t, last.R.copy(), last.p.copy(), last.v.copy()
        imu = self._imu_between(t_start, t)
        for k in range(len(imu) - 1):
            h = imu.t[k + 1] - imu.t[k]
            R1 = R @ exp_rotmat(0.5 * (imu.gyro[k] + imu.gyro[k + 1]) * h - last.bg * h)
            a = 0.5 * (R @ (imu.acc[k] - last.ba) + R1 @ (imu.acc[k + 1] - last.ba)) + self.g
            p = p + v * h + 0.5 * a * h * h
            v = v + a * h
            R = R1
        if len(imu):
            self._prop_cache = (key, float(imu.t[-1]), R, p, v)
        return Pose3.from_rt(R, p)

    def _add_keyframe(self, obs: FrameObservation) -> list:
        out = []
        last = self.window.states[-1]
        pre = preintegrate(self._imu_between(last.t, obs.t), last.ba, last.bg, self.noise)
        state = self._predict(last, pre, obs.t, self._next_kf)
        self.window.preints.append(pre)
        self.window.states.append(state)
        self._register_keyframe(state, obs)
        # late-arriving filtered sonar for earlier keyframes
        if self.cfg.use_sonar:
            for s in self.window.states:
                if s.kf_id not in self.window.sonar:
                    r = self._sonar_near(s.t)
                    if r is not None:
                        self.window.sonar[s.kf_id] = r
        self._solve()
        if len(self.window.states) > self.cfg.window_size + 1:
            out.extend(self._slide())
        self._trim_imu(self.window.states[0].t)
        return out

    def _repropagate(self):
        w = self.window
        for k, pre in enumerate(w.preints):
            s = w.states[k]
            if (np.linalg.norm(s.ba - pre.bias_acc) > self.cfg.repropagate_ba
                    or np.linalg.norm(s.bg - pre.bias_gyro) > self.cfg.repropagate_bg):
                w.preints[k] = preintegrate(pre.samples, s.ba, s.bg, self.noise)

    def _solve(self):
        if len(self.window.states) < 2:
            return
        self._repropagate()
        try:
            stats, H, prob = optimize_window(self.window, self.cfg, self.ext, self.g)
        except WindowDiverged as exc:
            raise EstimatorFailure(str(exc)) from exc
        self._last_H = H
        self._last_prob = prob
        self.solve_log.append(stats)
        if not np.all(np.isfinite([s.p for s in self.window.states])):
            raise EstimatorFailure("non-finite state estimate")
        if self.cfg.use_sonar:
            last = self.window.states[-1]
            r = self.window.sonar.get(last.kf_id)
            if r is not None:
                self.floor_z = sonar_seafloor_point(last, r, self.ext)[2]

    def _record(self, state: NavState, emitted: Pose3 | None = None) -> KeyframeRecord:
        """``emitted`` is the pose handed downstream; window quantities are
        moved rigidly onto it so records and edges telescope exactly."""
        obs = self._observations[state.kf_id]
        corr = Pose3.identity() if emitted is None else emitted @ state.pose.inverse()
        pts = {}
        ids_in = {s.kf_id for s in self.window.states}
        for fid in obs.ids:
            tr = self.window.tracks.get(int(fid))
            if tr is not None and tr.anchor in ids_in:
                pts[int(fid)] = corr.transform_point(self.window.point(tr, self.ext))
        rec = KeyframeRecord(state.kf_id, state.t, emitted or state.pose, obs, pts, state.copy())
        rec.window_points = None
        self._corr = corr
        return rec

    def _slide(self, final: bool = False) -> list:
        w = self.window
        s0, s1 = w.states[0], w.states[1]
        info = self._edge_information(final)
        rel = s0.pose.inverse() @ s1.pose
        edge = VioEdge(s0.kf_id, s1.kf_id, rel, info, s0.t, s1.t)
        rec0 = self._record(s0) if not self.records else None
        base = rec0.pose_local if rec0 is not None else self.records[-1].pose_local
        rec1 = self._record(s1, base @ rel)
        rec1.window_points = {tr.feature_id: self._corr.transform_point(self.window.point(tr, self.ext))
                              for tr in w.active_tracks()}
        if rec0 is not None:
            self.records.append(rec0)
        self.records.append(rec1)
        self.edges.append(edge)
        # drop the oldest state and re-anchor its tracks
        w.states.pop(0)
        w.preints.pop(0)
        w.sonar.pop(s0.kf_id, None)
        self._observations.pop(s0.kf_id, None)
        ids_in = {s.kf_id for s in w.states}
        for fid in list(w.tracks):
            tr = w.tracks[fid]
            tr.observations.pop(s0.kf_id, None)
            if not tr.observations:
                del w.tracks[fid]
                continue
            if tr.anchor == s0.kf_id:
                pt = feature_in_local_frame(s0, tr.ray, tr.depth, self.ext)
                new_anchor = min(k for k in tr.observations if k in ids_in)
                sa = w.state(new_anchor)
                Twc = sa.pose @ self.ext.body_from_camera
                pc = Twc.inverse().transform_point(pt)
                ray = bearing(tr.observations[new_anchor])
                tr.anchor = new_anchor
                tr.ray = ray
                tr.depth = float(np.clip(pc @ ray, self.cfg.depth_min, self.cfg.depth_max))
        w.prior = w.states[0].copy()
        w.prior_sigmas = np.concatenate([np.full(3, self.cfg.prior_sigma_p), np.full(3, self.cfg.prior_sigma_theta),
                                         np.full(3, self.cfg.prior_sigma_v), np.full(3, self.cfg.prior_sigma_ba),
                                         np.full(3, self.cfg.prior_sigma_bg)])
        return [("edge", edge, rec0, rec1)]

    def _edge_information(self, final: bool) -> np.ndarray:
        """Information of pose 1 given pose 0 from the window Hessian, in
        relative-pose coordinates (translation in frame 0, rotation right)."""
        w = self.window
        H = getattr(self, "_last_H", None)
        prob = getattr(self, "_last_prob", None)
        if H is None or prob is None or prob.S != len(w.states) or prob.kf_index.get(w.states[1].kf_id) != 1:
            return np.eye(6) * 1e4
        keep = np.r_[0:6, 15:21]
        Hr = schur_pose_information(H, keep)
        H11 = Hr[6:, 6:]
        M = np.zeros((6, 6))
        M[:3, :3] = w.states[1].R
        M[3:, 3:] = np.eye(3)
        # H is in (p, theta) order per state; relative residual uses (t, theta)
        info = M.T @ H11 @ M
        return 0.5 * (info + info.T)

    # ---- convenience
    def trajectory(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(t, positions, quats) of all emitted keyframes (local frame)."""
        t = np.array([r.t for r in self.records])
        p = np.array([r.pose_local.t for r in self.records]).reshape(-1, 3)
        q = np.array([r.pose_local.q for r in self.records]).reshape(-1, 4)
        return t, p, q


def _gravity_alignment(mean_acc) -> np.ndarray:
    """Rotation local<-body with zero yaw mapping the measured specific force to +z."""
    a = np.asarray(mean_acc, dtype=float)
    a = a / np.linalg.norm(a)
    roll = np.arctan2(a[1], a[2])
    pitch = np.arctan2(-a[0], np.hypot(a[1], a[2]))
    cr, sr, cp, sp = np.cos(roll), np.sin(roll), np.cos(pitch), np.sin(pitch)
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return Ry @ Rx


def run_vio(dataset, cfg: VioConfig | None = None) -> VioEstimator:
    """Replay a dataset through the odometry (no back end)."""
    cfg = cfg or VioConfig()
    est = VioEstimator(cfg, dataset.noise, dataset.world.extrinsics, dataset.world.constants.gravity)
    for t, kind, s in dataset.events():
        if kind == "imu":
            est.push_imu(s.t, s.acc, s.gyro)
        elif kind == "sonar":
            est.push_sonar(s)
        elif kind == "frame":
            est.push_frame(s)
    est.finish()
    return est
