"""Global pose graph over keyframe poses in the world frame.

Edges: VIO relative poses between consecutive keyframes, magnetometer
(geomagnetic) factors on single nodes, robust loop-closure edges, and tilt
factors carrying the odometry's gravity direction (the odometry frame is
gravity aligned, so its roll and pitch are absolute). Nodes
are perturbed on the right (``R <- R Exp(dtheta)``) and additively in world
position; every per-node block is ordered ``(dp, dtheta)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial.transform import Rotation

from vims.geometry import Pose3, log_rotmat, right_jacobian_inv, skew

KINDS = ("vio", "magnetometer", "loop", "tilt")
UNARY = ("magnetometer", "tilt")
UP = np.array([0.0, 0.0, 1.0])


class GraphDiverged(RuntimeError):
    pass


@dataclass
class MeasurementEdge:
    kind: str
    nodes: tuple
    z: object  # Pose3 for relative edges, body-frame 3-vector for unary edges
    information: np.ndarray
    robust: bool = False
    sqrt_info: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown edge kind {self.kind!r}")
        info = np.asarray(self.information, dtype=float)
        if not np.allclose(info, info.T, atol=1e-9 * max(1.0, np.abs(info).max())):
            raise ValueError("information must be symmetric")
        self.information = 0.5 * (info + info.T)
        self.sqrt_info = np.linalg.cholesky(self.information + 1e-12 * np.eye(len(info))).T
        if self.kind == "loop":
            self.robust = True


@dataclass
class GraphConfig:
    huber_delta: float = 1.0
    max_iterations: int = 50
    rel_tol: float = 1e-8
    grad_tol: float = 1e-8
    max_rejections: int = 8
    lambda_init: float = 1e-6
    # after a robust solve, loop edges still this many whitened sigmas off are
    # switched off and the graph is solved again
    loop_gate: float = 5.0
    prune_loops: bool = True


@dataclass
class GraphSolution:
    poses: list[Pose3]
    initial_cost: float
    cost: float
    iterations: int
    converged: bool
    chi2: dict = field(default_factory=dict)
    costs: list = field(default_factory=list)


# --------------------------------------------------------------------------
# residuals
# --------------------------------------------------------------------------

def magnetometer_residual(R: np.ndarray, z, b_world, jacobian: bool = False):
    """``R^T B_w - z``; Jacobian with respect to the right rotation perturbation."""
    pred = R.T @ np.asarray(b_world, dtype=float)
    r = pred - np.asarray(z, dtype=float)
    if not jacobian:
        return r
    return r, skew(pred)


def loop_residual(Ti: Pose3, Tj: Pose3, z: Pose3, jacobian: bool = False):
    """Split-form ``log(z^-1 T_i^-1 T_j)``: translation then rotation.

    Jacobians are (6, 6) with respect to ``(dp, dtheta)`` of each node.
    """
    Ri, Rj, Rz = Ti.R, Tj.R, z.R
    d = Ri.T @ (Tj.t - Ti.t)
    rt = Rz.T @ (d - z.t)
    E = Rz.T @ Ri.T @ Rj
    rr = log_rotmat(E)
    r = np.concatenate([rt, rr])
    if not jacobian:
        return r
    Jinv = right_jacobian_inv(rr)
    Ji = np.zeros((6, 6))
    Jj = np.zeros((6, 6))
    Ji[:3, :3] = -Rz.T @ Ri.T
    Ji[:3, 3:] = Rz.T @ skew(d)
    Ji[3:, 3:] = -Jinv @ Rj.T @ Ri
    Jj[:3, :3] = Rz.T @ Ri.T
    Jj[3:, 3:] = Jinv
    return r, Ji, Jj


# batched helpers -----------------------------------------------------------

def _mv(A, x):
    """Batched matrix-vector product."""
    return (A @ x[..., None])[..., 0]


def _skew_b(v):
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -v[..., 2], v[..., 1]
    S[..., 1, 0], S[..., 1, 2] = v[..., 2], -v[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -v[..., 1], v[..., 0]
    return S


def _log_b(R):
    if len(R) == 0:
        return np.zeros((0, 3))
    v = np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=1)
    c = np.clip((np.trace(R, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
    th = np.arccos(c)
    sn = np.sin(th)
    small = th < 1e-6
    f = np.where(small, 0.5 + th ** 2 / 12.0, th / (2.0 * np.where(small, 1.0, sn)))
    out = f[:, None] * v
    near_pi = th > np.pi - 1e-3
    if near_pi.any():
        out[near_pi] = Rotation.from_matrix(R[near_pi]).as_rotvec()
    return out


def _exp_b(w):
    if len(w) == 0:
        return np.zeros((0, 3, 3))
    return Rotation.from_rotvec(w).as_matrix()


def _jr_inv_b(phi):
    th = np.linalg.norm(phi, axis=-1)
    S = _skew_b(phi)
    S2 = S @ S
    small = th < 1e-5
    ths = np.where(small, 1.0, th)
    c = np.where(small, 1.0 / 12.0, 1.0 / ths ** 2 - (1.0 + np.cos(ths)) / (2.0 * ths * np.sin(ths)))
    return np.eye(3) + 0.5 * S + c[:, None, None] * S2


# --------------------------------------------------------------------------
# graph
# --------------------------------------------------------------------------

class PoseGraph:
    def __init__(self, b_world=(0.0, 30.0, -40.0), config: GraphConfig | None = None):
        self.b_world = np.asarray(b_world, dtype=float)
        self.config = config or GraphConfig()
        self.poses: list[Pose3] = []
        self.keys: list = []
        self.edges: list[MeasurementEdge] = []
        self.prior: tuple[int, Pose3, np.ndarray] | None = None
        self.disabled: set[int] = set()  # indices into edges
        self._packed = None
        self.solves: list[dict] = []

    def __len__(self):
        return len(self.poses)

    def add_node(self, pose: Pose3, key=None) -> int:
        self.poses.append(pose)
        self.keys.append(len(self.poses) - 1 if key is None else key)
        return len(self.poses) - 1

    def _check(self, *idx):
        for i in idx:
            if not 0 <= i < len(self.poses):
                raise KeyError(f"unknown node {i}")

    def add_edge(self, edge: MeasurementEdge):
        self._check(*edge.nodes)
        self.edges.append(edge)

    def add_vio_edge(self, i: int, j: int, z: Pose3, information):
        self.add_edge(MeasurementEdge("vio", (i, j), z, information))

    def add_loop_edge(self, i: int, j: int, z: Pose3, information):
        self.add_edge(MeasurementEdge("loop", (i, j), z, information, robust=True))

    def add_magnetometer_edge(self, i: int, z, information):
        self.add_edge(MeasurementEdge("magnetometer", (i,), np.asarray(z, dtype=float), information))

    def add_tilt_edge(self, i: int, up_body, information):
        """``R^T e_z - up_body``: the world vertical seen in the body frame."""
        self.add_edge(MeasurementEdge("tilt", (i,), np.asarray(up_body, dtype=float), information))

    def set_prior(self, node: int, pose: Pose3, sigmas):
        """Gauge prior: world position and world-axis rotation error of one node."""
        self._check(node)
        self.prior = (node, pose, 1.0 / np.asarray(sigmas, dtype=float) ** 2)

    def edge_counts(self) -> dict:
        out = {k: 0 for k in KINDS}
        for e in self.edges:
            out[e.kind] += 1
        return out

    # ---- evaluation
    def _pack(self, kinds=KINDS, skip_disabled: bool = True):
        key = (len(self.edges), frozenset(self.disabled) if skip_disabled else None, kinds)
        if self._packed is not None and self._packed[0] == key:
            return self._packed[1]
        groups = {}
        for kind in kinds:
            es = [e for k, e in enumerate(self.edges)
                  if e.kind == kind and not (skip_disabled and k in self.disabled)]
            if not es:
                continue
            L = np.array([e.sqrt_info for e in es])
            if kind in UNARY:
                ref = self.b_world if kind == "magnetometer" else UP
                groups[kind] = dict(i=np.array([e.nodes[0] for e in es]), z=np.array([e.z for e in es]), L=L,
                                    ref=ref)
            else:
                groups[kind] = dict(i=np.array([e.nodes[0] for e in es]), j=np.array([e.nodes[1] for e in es]),
                                    zt=np.array([e.z.t for e in es]), zR=np.array([e.z.R for e in es]), L=L,
                                    robust=kind == "loop")
        self._packed = (key, groups)
        return groups

    def _evaluate(self, P, R, groups, jacobians: bool):
        """Returns cost, chi2 per kind and (if asked) the normal equations."""
        cfg = self.config
        n = len(P)
        cost = 0.0
        chi2 = {k: 0.0 for k in KINDS}
        rows, cols, vals = [], [], []
        g = np.zeros(6 * n)

        def accumulate(nodes_list, Js, rw, w):
            # Js: list of (m, d, 6) whitened Jacobians for each endpoint
            for a, (na, Ja) in enumerate(zip(nodes_list, Js)):
                Jaw = Ja * w[:, None, None]
                ga = (np.swapaxes(Jaw, 1, 2) @ rw[:, :, None])[:, :, 0]
                np.add.at(g, (6 * na[:, None] + np.arange(6)).ravel(), ga.ravel())
                for nb, Jb in zip(nodes_list, Js):
                    blk = np.swapaxes(Jaw, 1, 2) @ Jb
                    r_idx = 6 * na[:, None, None] + np.arange(6)[None, :, None]
                    c_idx = 6 * nb[:, None, None] + np.arange(6)[None, None, :]
                    rows.append(np.broadcast_to(r_idx, blk.shape).ravel())
                    cols.append(np.broadcast_to(c_idx, blk.shape).ravel())
                    vals.append(blk.ravel())

        for kind, G in groups.items():
            if kind in UNARY:
                i = G["i"]
                pred = G["ref"] @ R[i]
                r = pred - G["z"]
                rw = _mv(G["L"], r)
                s2 = np.sum(rw ** 2, axis=1)
                chi2[kind] += float(s2.sum())
                cost += 0.5 * float(s2.sum())
                if jacobians:
                    J = np.zeros((len(i), 3, 6))
                    J[:, :, 3:] = _skew_b(pred)
                    accumulate([i], [G["L"] @ J], rw, np.ones(len(i)))
                continue
            i, j = G["i"], G["j"]
            Ri, Rj, Rz = R[i], R[j], G["zR"]
            RiT = np.transpose(Ri, (0, 2, 1))
            RzT = np.transpose(Rz, (0, 2, 1))
            d = _mv(RiT, P[j] - P[i])
            rt = _mv(RzT, d - G["zt"])
            E = RzT @ RiT @ Rj
            rr = _log_b(E)
            r = np.concatenate([rt, rr], axis=1)
            rw = _mv(G["L"], r)
            s = np.sqrt(np.sum(rw ** 2, axis=1))
            chi2[kind] += float(np.sum(s ** 2))
            if G["robust"]:
                delta = cfg.huber_delta
                rho = np.where(s <= delta, s ** 2, 2.0 * delta * s - delta ** 2)
                w = np.where(s <= delta, 1.0, delta / np.maximum(s, 1e-300))
            else:
                rho = s ** 2
                w = np.ones(len(s))
            cost += 0.5 * float(rho.sum())
            if jacobians:
                m = len(i)
                Jinv = _jr_inv_b(rr)
                Ji = np.zeros((m, 6, 6))
                Jj = np.zeros((m, 6, 6))
                A = RzT @ RiT
                Ji[:, :3, :3] = -A
                Ji[:, :3, 3:] = RzT @ _skew_b(d)
                Ji[:, 3:, 3:] = -Jinv @ np.transpose(Rj, (0, 2, 1)) @ Ri
                Jj[:, :3, :3] = A
                Jj[:, 3:, 3:] = Jinv
                L = G["L"]
                accumulate([i, j], [L @ Ji, L @ Jj], rw, w)

        if self.prior is not None:
            k, pose, info = self.prior
            e = log_rotmat(R[k] @ pose.R.T)
            r = np.concatenate([P[k] - pose.t, e])
            sq = np.sqrt(info)
            rw = sq * r
            cost += 0.5 * float(rw @ rw)
            if jacobians:
                J = np.zeros((1, 6, 6))
                J[0, :3, :3] = np.eye(3)
                J[0, 3:, 3:] = right_jacobian_inv(e) @ pose.R
                accumulate([np.array([k])], [sq[None, :, None] * J], rw[None], np.ones(1))

        if not jacobians:
            return cost, chi2, None, None
        H = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(6 * n, 6 * n)).tocsc() if vals else sp.csc_matrix((6 * n, 6 * n))
        return cost, chi2, H, g

    def loop_errors(self) -> dict[int, float]:
        """Whitened residual norm of every loop edge at the current poses."""
        ks = [k for k, e in enumerate(self.edges) if e.kind == "loop"]
        if not ks:
            return {}
        G = self._pack(("loop",), skip_disabled=False)["loop"]
        i, j = G["i"], G["j"]
        Ri = np.array([self.poses[a].R for a in i])
        Rj = np.array([self.poses[b].R for b in j])
        dp = np.array([self.poses[b].t - self.poses[a].t for a, b in zip(i, j)])
        RzT = np.transpose(G["zR"], (0, 2, 1))
        RiT = np.transpose(Ri, (0, 2, 1))
        rt = _mv(RzT, _mv(RiT, dp) - G["zt"])
        rr = _log_b(RzT @ RiT @ Rj)
        rw = _mv(G["L"], np.concatenate([rt, rr], axis=1))
        return dict(zip(ks, np.linalg.norm(rw, axis=1).tolist()))

    def optimize(self, reset_pruning: bool = False) -> GraphSolution:
        """Robust solve; then, while the worst enabled loop edge remains beyond
        the gate, switch it off and solve again from the pre-solve poses.

        Switched-off edges stay off for later calls unless ``reset_pruning``.
        """
        start = list(self.poses)
        if reset_pruning:
            self.disabled = set()
        sol = self._solve()
        if not self.config.prune_loops:
            return sol
        while True:
            errs = {k: e for k, e in self.loop_errors().items() if k not in self.disabled}
            if not errs:
                return sol
            worst = max(errs, key=lambda k: (errs[k], k))
            if errs[worst] <= self.config.loop_gate:
                return sol
            self.disabled.add(worst)
            self.poses = list(start)
            sol = self._solve()

    def _solve(self) -> GraphSolution:
        """Levenberg-Marquardt on sparse normal equations; updates poses in place."""
        cfg = self.config
        n = len(self.poses)
        if n == 0:
            raise ValueError("empty graph")
        P = np.array([p.t for p in self.poses], dtype=float)
        R = np.array([p.R for p in self.poses], dtype=float)
        groups = self._pack()
        cost, chi2, H, g = self._evaluate(P, R, groups, True)
        if not np.isfinite(cost):
            raise GraphDiverged("non-finite initial cost")
        costs = [cost]
        lam = cfg.lambda_init
        it = 0
        rejections = 0
        converged = False
        while it < cfg.max_iterations:
            it += 1
            if np.max(np.abs(g)) < cfg.grad_tol:
                converged = True
                break
            D = np.maximum(H.diagonal(), 1e-9)
            A = (H + sp.diags(lam * D + 1e-12)).tocsc()
            try:
                dx = -spla.spsolve(A, g)
            except RuntimeError:
                lam *= 10.0
                continue
            if not np.all(np.isfinite(dx)):
                lam *= 10.0
                rejections += 1
                if rejections >= cfg.max_rejections:
                    break
                continue
            dx = dx.reshape(n, 6)
            P_new = P + dx[:, :3]
            R_new = R @ _exp_b(dx[:, 3:])
            new_cost, _, _, _ = self._evaluate(P_new, R_new, groups, False)
            if np.isfinite(new_cost) and new_cost < cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                P, R = P_new, R_new
                cost, chi2, H, g = self._evaluate(P, R, groups, True)
                costs.append(cost)
                lam = max(lam / 10.0, 1e-12)
                rejections = 0
                if rel < cfg.rel_tol or cost < 1e-24:
                    converged = True
                    break
            else:
                lam *= 10.0
                rejections += 1
                if rejections >= cfg.max_rejections:
                    converged = True
                    break
        if not np.all(np.isfinite(P)) or not np.isfinite(cost):
            raise GraphDiverged("pose graph solution is not finite")
        self.poses = [Pose3.from_rt(R[k], P[k]) for k in range(n)]
        sol = GraphSolution(list(self.poses), costs[0], cost, it, converged, chi2, costs)
        return sol

    def record_solve(self, sol: GraphSolution, trigger: str):
        counts = self.edge_counts()
        self.solves.append({
            "solve": len(self.solves), "trigger": trigger, "nodes": len(self.poses),
            "vio_edges": counts["vio"], "mag_edges": counts["magnetometer"], "loop_edges": counts["loop"],
            "tilt_edges": counts["tilt"],
            "initial_cost": sol.initial_cost, "final_cost": sol.cost, "iterations": sol.iterations,
            "chi2_vio": sol.chi2.get("vio", 0.0), "chi2_mag": sol.chi2.get("magnetometer", 0.0),
            "chi2_loop": sol.chi2.get("loop", 0.0), "chi2_tilt": sol.chi2.get("tilt", 0.0)})

    def write_stats_csv(self, path):
        cols = ["solve", "trigger", "nodes", "vio_edges", "mag_edges", "loop_edges", "tilt_edges", "initial_cost",
                "final_cost", "iterations", "chi2_vio", "chi2_mag", "chi2_loop", "chi2_tilt"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for s in self.solves:
                w.writerow([f"{s[c]:.9g}" if isinstance(s[c], float) else s[c] for c in cols])
