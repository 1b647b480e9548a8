"""Synthetic pose-graph scenarios shared by the unit and acceptance tests."""

from dataclasses import dataclass

import numpy as np

from vims.geometry import Pose3, exp_rotmat, yaw_rotmat
from vims.pose_graph import PoseGraph


def circle_truth(n: int, radius: float = 10.0) -> list[Pose3]:
    a = 2 * np.pi * np.arange(n) / n
    return [Pose3.from_rt(yaw_rotmat(ak), radius * np.array([np.sin(ak), 1 - np.cos(ak), 0.0])) for ak in a]


def pose_ate(poses, truth) -> float:
    """Translation RMSE without alignment (the graph's gauge is pinned to truth)."""
    return float(np.sqrt(np.mean([np.sum((p.t - q.t) ** 2) for p, q in zip(poses, truth)])))


@dataclass
class DriftChain:
    """A closed circle of odometry edges with a constant yaw bias per edge."""

    truth: list
    odometry: list  # measured relative poses
    vio_info: np.ndarray
    loop_info: np.ndarray

    @classmethod
    def make(cls, seed: int = 0, n: int = 200, drift: float = 0.002, sigma_t: float = 0.02,
             sigma_r: float = 0.02, noise_t: float = 0.002, noise_r: float = 0.0005):
        rng = np.random.default_rng(seed)
        truth = circle_truth(n)
        odo = []
        for k in range(n - 1):
            z = truth[k].inverse() @ truth[k + 1]
            dR = exp_rotmat(rng.normal(0, noise_r, 3) + [0.0, 0.0, drift])
            odo.append(Pose3.from_rt(z.R @ dR, z.t + rng.normal(0, noise_t, 3)))
        return cls(truth, odo, np.diag([sigma_t ** -2] * 3 + [sigma_r ** -2] * 3),
                   np.diag([0.05 ** -2] * 3 + [0.01 ** -2] * 3))

    @property
    def n(self) -> int:
        return len(self.truth)

    def dead_reckoning(self) -> list:
        est = [self.truth[0]]
        for z in self.odometry:
            est.append(est[-1] @ z)
        return est

    def true_relative(self, i: int, j: int) -> Pose3:
        return self.truth[i].inverse() @ self.truth[j]

    def graph(self, loops=(), config=None) -> PoseGraph:
        g = PoseGraph(config=config)
        for p in self.dead_reckoning():
            g.add_node(p)
        for k, z in enumerate(self.odometry):
            g.add_vio_edge(k, k + 1, z, self.vio_info)
        g.set_prior(0, self.truth[0], [1e-3] * 6)
        for i, j, z in loops:
            g.add_loop_edge(i, j, z, self.loop_info)
        return g

    def closing_loop(self):
        return (self.n - 1, 0, self.true_relative(self.n - 1, 0))

    def outlier_loop(self, i: int = 150, j: int = 20, error: float = 10.0):
        z = self.true_relative(i, j)
        return (i, j, Pose3.from_rt(z.R, z.t + [error, 0.0, 0.0]))
