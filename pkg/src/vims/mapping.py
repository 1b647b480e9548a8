"""Multi-scale map: visual submaps (one per keyframe), radius-bounded magnetic
submaps tied to visual submaps, and the magnetic -> visual clustering used to
gate place recognition."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from vims.geometry import Pose3


@dataclass
class VisualSubmap:
    index: int
    kf_id: int
    t: float
    pose_local: Pose3
    pose_world: Pose3
    feature_ids: np.ndarray  # (N,)
    uv: np.ndarray  # (N, 2) normalized image coordinates
    descriptors: np.ndarray  # (N, 32) uint8
    bow: dict = field(default_factory=dict)


@dataclass
class MagneticSubmap:
    index: int
    tied_visual: int
    t_center: float
    position_local: np.ndarray
    position_world: np.ndarray
    amplitude: np.ndarray  # representative ENU amplitude, microtesla
    radius: float
    offset: np.ndarray  # position in the tied visual submap's body frame
    n_members: int = 1
    spread: float = 0.0  # RMS member deviation from the representative


@dataclass
class MapConfig:
    variation_threshold: float = 0.15  # relative, per component
    amplitude_floor: float = 0.05  # microtesla; relative variation is measured against max(|median|, floor)
    radius_floor: float = 0.05  # m
    cluster_slack: float = 1.0  # r_vis, m


@dataclass
class _Member:
    t: float
    amplitude: np.ndarray
    position: np.ndarray


class MultiScaleMap:
    def __init__(self, config: MapConfig | None = None):
        self.config = config or MapConfig()
        self.visual: list[VisualSubmap] = []
        self.magnetic: list[MagneticSubmap] = []
        self._open: list[_Member] = []
        self._pending: list[list[_Member]] = []  # sealed but not yet tied
        self._clusters: list[list[int]] | None = None

    # ---- visual
    def add_visual_submap(self, kf_id: int, t: float, pose_local: Pose3, feature_ids, uv, descriptors,
                          bow: dict | None = None, pose_world: Pose3 | None = None) -> int:
        idx = len(self.visual)
        self.visual.append(VisualSubmap(
            idx, int(kf_id), float(t), pose_local, pose_world if pose_world is not None else pose_local,
            np.asarray(feature_ids, dtype=np.int64), np.asarray(uv, dtype=float).reshape(-1, 2),
            np.asarray(descriptors, dtype=np.uint8).reshape(-1, 32), dict(bow or {})))
        self._clusters = None
        self._tie_pending()
        return idx

    def visual_positions(self) -> np.ndarray:
        return np.array([v.pose_world.t for v in self.visual]).reshape(-1, 3)

    # ---- magnetic
    def _fits(self, members: list[_Member]) -> bool:
        A = np.array([m.amplitude for m in members])
        med = np.median(A, axis=0)
        scale = np.maximum(np.abs(med), self.config.amplitude_floor)
        return bool(np.all(np.abs(A - med) <= self.config.variation_threshold * scale + 1e-12))

    def add_magnetic_signature(self, t: float, amplitude, position_local) -> MagneticSubmap | None:
        """Accumulate one signature; returns the submap sealed by it, if any.

        A signature joins the open submap when every member, the new one
        included, stays within the relative variation threshold of the
        members' componentwise median. Otherwise the open submap is sealed
        and the signature starts a new one.
        """
        m = _Member(float(t), np.asarray(amplitude, dtype=float).copy(), np.asarray(position_local, dtype=float).copy())
        if self._open and self._fits(self._open + [m]):
            self._open.append(m)
            return None
        sealed = None
        if self._open:
            self._pending.append(self._open)
            sealed = self._tie_pending()
        self._open = [m]
        return sealed

    def flush(self) -> MagneticSubmap | None:
        if not self._open:
            return None
        self._pending.append(self._open)
        self._open = []
        return self._tie_pending()

    def _tie_pending(self) -> MagneticSubmap | None:
        last = None
        while self._pending and self.visual:
            last = self._seal(self._pending.pop(0))
        return last

    def _seal(self, members: list[_Member]) -> MagneticSubmap:
        cfg = self.config
        A = np.array([m.amplitude for m in members])
        P = np.array([m.position for m in members])
        mid = members[len(members) // 2]
        rep = np.median(A, axis=0)
        radius = max(float(np.max(np.linalg.norm(P - mid.position, axis=1))), cfg.radius_floor)
        times = np.array([v.t for v in self.visual])
        tied = int(np.argmin(np.abs(times - mid.t)))
        v = self.visual[tied]
        offset = v.pose_local.R.T @ (mid.position - v.pose_local.t)
        world = v.pose_world.R @ offset + v.pose_world.t
        spread = float(np.sqrt(np.mean(np.sum((A - rep) ** 2, axis=1))))
        sm = MagneticSubmap(len(self.magnetic), tied, mid.t, mid.position.copy(), world, rep, radius, offset,
                            len(members), spread)
        self.magnetic.append(sm)
        self._clusters = None
        return sm

    def signature_noise(self) -> float:
        """Running estimate of signature scatter: median member spread over
        sealed multi-member submaps."""
        s = [m.spread for m in self.magnetic if m.n_members >= 3]
        return float(np.median(s)) if s else float("nan")

    # ---- clustering
    def cluster_visual(self) -> list[list[int]]:
        if self._clusters is not None:
            return self._clusters
        P = self.visual_positions()
        out = []
        for m in self.magnetic:
            if len(P):
                d = np.linalg.norm(P - m.position_world, axis=1)
                members = set(np.flatnonzero(d <= m.radius + self.config.cluster_slack).tolist())
            else:
                members = set()
            members.add(m.tied_visual)
            out.append(sorted(members))
        self._clusters = out
        return out

    def cluster(self, magnetic_index: int) -> list[int]:
        return self.cluster_visual()[magnetic_index]

    # ---- optimisation feedback
    def update_world_poses(self, poses) -> None:
        """Overwrite visual world poses (``poses[i]`` for submap ``i``) and carry
        every magnetic submap along with its tied visual submap."""
        if len(poses) < len(self.visual):
            raise KeyError(f"pose set covers {len(poses)} of {len(self.visual)} visual submaps")
        for i, v in enumerate(self.visual):
            p = poses[i]
            if p is None:
                raise KeyError(f"missing pose for visual submap {i}")
            v.pose_world = p
        for m in self.magnetic:
            v = self.visual[m.tied_visual]
            m.position_world = v.pose_world.R @ m.offset + v.pose_world.t
        self._clusters = None

    # ---- export
    def to_dict(self) -> dict:
        clusters = self.cluster_visual()
        return {
            "visual": [{"index": v.index, "kf_id": v.kf_id, "t": v.t,
                        "pose_local": _pose_list(v.pose_local), "pose_world": _pose_list(v.pose_world),
                        "n_features": int(len(v.feature_ids))} for v in self.visual],
            "magnetic": [{"index": m.index, "tied_visual": m.tied_visual, "t": m.t_center,
                          "position_local": _floats(m.position_local), "position_world": _floats(m.position_world),
                          "amplitude": _floats(m.amplitude), "radius": m.radius, "n_members": m.n_members,
                          "cluster": clusters[m.index]} for m in self.magnetic],
        }

    def export_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    def export_magnetic_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "tied_visual", "t", "x", "y", "z", "amp_e", "amp_n", "amp_u", "radius", "n_members"])
            for m in self.magnetic:
                w.writerow([m.index, m.tied_visual, f"{m.t_center:.6f}", *(f"{x:.6f}" for x in m.position_world),
                            *(f"{a:.6f}" for a in m.amplitude), f"{m.radius:.6f}", m.n_members])


def _floats(a) -> list:
    return [float(x) for x in np.ravel(a)]


def _pose_list(p: Pose3) -> list:
    return _floats(p.t) + _floats(p.q)
