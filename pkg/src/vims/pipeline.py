"""End-to-end SLAM run: odometry front end, multi-scale map, hierarchical loop
closing and the global pose graph, driven by one replayed dataset."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from vims.descriptors import (BRIEF_LIKE, ORB_LIKE, DescriptorModelSpec, DescriptorSet, default_vocabulary,
                              describe_many, replicate_across_scales)
from vims.geometry import Pose3, yaw_rotmat
from vims.loop_closing import LoopCloser, LoopConfig, QueryPoints
from vims.mapping import MapConfig, MultiScaleMap
from vims.pose_graph import GraphConfig, PoseGraph
from vims.preprocessing import SignatureExtractor, separate_fields
from vims.sim.io import write_tum
from vims.sim.scenario import ConfigError, ScenarioDataset
from vims.vio import VioConfig, VioEstimator

TOGGLES = ("use_sonar", "use_alternating", "rotation_aware_descriptors", "use_geomagnetic")

PRESETS = {
    "full": dict(use_sonar=True, use_alternating=True, rotation_aware_descriptors=True, use_geomagnetic=True),
    "wo_sonar": dict(use_sonar=False, use_alternating=True, rotation_aware_descriptors=True, use_geomagnetic=True),
    "wo_alter": dict(use_sonar=True, use_alternating=False, rotation_aware_descriptors=True, use_geomagnetic=True),
    "wo_orb": dict(use_sonar=True, use_alternating=True, rotation_aware_descriptors=False, use_geomagnetic=True),
    "wo_geom": dict(use_sonar=True, use_alternating=True, rotation_aware_descriptors=True, use_geomagnetic=False),
    "vi_slam": dict(use_sonar=True, use_alternating=False, rotation_aware_descriptors=False, use_geomagnetic=False),
}
ABLATION_ORDER = ("full", "wo_sonar", "wo_alter", "wo_orb", "wo_geom", "vi_slam")

DESCRIPTOR_STREAM = 5


@dataclass
class RunConfig:
    use_sonar: bool = True
    use_alternating: bool = True
    rotation_aware_descriptors: bool = True
    use_geomagnetic: bool = True
    seed: int | None = None  # None = the dataset's seed
    # recognition / verification
    k_m: int = 3
    tau_mag: float = float("nan")  # nan = 3 x running signature noise
    tau_bow: float = 0.05
    ratio: float = 0.7
    min_inliers: int = 12
    min_matchable: int = 20
    exclusion_gap: int = 50
    ransac_iterations: int = 200
    inlier_threshold: float = 0.01
    scale_levels: int = 3
    response_floor: float = 0.0
    # map
    variation_threshold: float = 0.15
    cluster_slack: float = 1.0
    signature_period: float = 2.0
    signature_interval: float = 0.4
    # pose graph
    huber_delta: float = 1.0
    reoptimize_every: int = 20
    loop_solve_gap: int = 5  # keyframes between loop-triggered solves
    loop_gate: float = 5.0
    vio_info_scale: float = 1.0
    tilt_sigma: float = 0.002  # rad, odometry roll/pitch as an absolute factor

    @classmethod
    def preset(cls, name: str, **overrides) -> "RunConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    def validate(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError("ratio must be in (0, 1]")
        if self.min_inliers < 4 or self.min_matchable < self.min_inliers:
            raise ConfigError("need 4 <= min_inliers <= min_matchable")
        if not 1 <= self.scale_levels <= 8:
            raise ConfigError("scale_levels must be in [1, 8]")
        if self.k_m < 1 or self.exclusion_gap < 0 or self.reoptimize_every < 1 or self.loop_solve_gap < 1:
            raise ConfigError("k_m, exclusion_gap, reoptimize_every and loop_solve_gap must be positive")
        return self

    def toggles(self) -> dict:
        return {k: getattr(self, k) for k in TOGGLES}

    def loop_config(self) -> LoopConfig:
        return LoopConfig(
            k_m=self.k_m, tau_mag=None if not np.isfinite(self.tau_mag) else self.tau_mag, tau_bow=self.tau_bow,
            exclusion_gap=self.exclusion_gap, min_inliers=self.min_inliers, min_matchable=self.min_matchable,
            ratio=self.ratio, ransac_iterations=self.ransac_iterations, inlier_threshold=self.inlier_threshold,
            hierarchical=self.use_alternating)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in fields:
                raise ConfigError(f"unknown run key {k!r}")
            kw[k] = _coerce(v, fields[k].type, k)
        return cls(**kw).validate()


def _coerce(v, typ: str, key: str):
    if not isinstance(v, str):
        return v
    s = v.strip()
    try:
        if typ == "bool":
            if s.lower() in ("1", "true", "yes", "on"):
                return True
            if s.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if typ == "int":
            return int(s)
        if typ == "int | None":
            return None if s.lower() in ("", "none") else int(s)
        if typ == "float":
            return float(s)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {v!r}") from exc
    return s


# --------------------------------------------------------------------------
# front end (independent of the back-end toggles, so it can be shared)
# --------------------------------------------------------------------------

@dataclass
class FrontendResult:
    records: list  # KeyframeRecord per emitted keyframe, in order
    edges: list  # VioEdge between consecutive records
    queries: dict  # kf_id -> (pose_local, {fid: xyz}, {fid: (rotation, scale, response)})
    signatures: list  # MagneticSignature, ENU = odometry frame
    geomagnetic: tuple  # (t, field) separated geomagnetic stream, body frame
    wall_time: float = 0.0


def run_frontend(ds: ScenarioDataset, use_sonar: bool, vio_cfg: VioConfig | None = None) -> FrontendResult:
    """Replay the dataset through the odometry and the signature extractor.

    Raises ``EstimatorFailure`` when the odometry cannot run."""
    t0 = time.perf_counter()
    cfg = dataclasses.replace(vio_cfg or VioConfig(), use_sonar=use_sonar)
    est = VioEstimator(cfg, ds.noise, ds.world.extrinsics, ds.world.constants.gravity)
    sc = ds.config
    sig = SignatureExtractor(sc.mag_rate, sc.drive_frequency, 2.0, 0.4, max_gap=1.5 / sc.camera_rate + 1e-6)
    last_seen: dict[int, tuple] = {}
    queries: dict[int, tuple] = {}
    signatures = []
    mag_buf_t, mag_buf_b = [], []

    def handle(items):
        for it in items:
            if it[0] == "pose":
                sig.push_orientation(it[1], it[2].q)
            else:
                rec = it[3]
                if rec.window_points is not None:
                    feats = {fid: last_seen[fid] for fid in rec.window_points if fid in last_seen}
                    queries[rec.kf_id] = (rec.pose_local, rec.window_points, feats)

    for t, kind, s in ds.events():
        if kind == "imu":
            est.push_imu(s.t, s.acc, s.gyro)
        elif kind == "mag":
            mag_buf_t.append(s.t)
            mag_buf_b.append(s.field_body)
        elif kind == "sonar":
            est.push_sonar(s)
        else:
            if mag_buf_t:
                sig.push_mag_block(np.array(mag_buf_t), np.array(mag_buf_b))
                mag_buf_t, mag_buf_b = [], []
            for fid, rot, scale, resp in zip(s.ids, s.rotation, s.scale, s.response):
                last_seen[int(fid)] = (float(rot), float(scale), float(resp))
            handle(est.push_frame(s))
            signatures.extend(sig.poll())
    handle(est.finish())
    if mag_buf_t:
        sig.push_mag_block(np.array(mag_buf_t), np.array(mag_buf_b))
    signatures.extend(sig.poll())
    geo, _ = separate_fields(ds.mag, sc.drive_frequency)
    return FrontendResult(est.records, est.edges, queries, signatures, (geo.t, geo.field),
                          time.perf_counter() - t0)


# --------------------------------------------------------------------------
# back end
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    config: RunConfig
    keyframe_t: np.ndarray
    world_poses: list
    local_poses: list
    map: MultiScaleMap
    closer: LoopCloser
    graph: PoseGraph
    loops: list = field(default_factory=list)
    frontend_time: float = 0.0
    backend_time: float = 0.0

    def trajectory(self):
        p = np.array([T.t for T in self.world_poses]).reshape(-1, 3)
        q = np.array([T.q for T in self.world_poses]).reshape(-1, 4)
        return self.keyframe_t, p, q

    def local_trajectory(self):
        p = np.array([T.t for T in self.local_poses]).reshape(-1, 3)
        q = np.array([T.q for T in self.local_poses]).reshape(-1, 4)
        return self.keyframe_t, p, q


def _descriptor_rng(seed: int, kf_id: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), DESCRIPTOR_STREAM, int(kf_id), int(purpose)])


def _geomagnetic_at(geo_t: np.ndarray, geo_b: np.ndarray, t: float, half: float = 0.05):
    a, b = np.searchsorted(geo_t, [t - half, t + half])
    if b <= a:
        return None
    return geo_b[a:b].mean(axis=0)


def _initial_yaw(b_body: np.ndarray, R_local: np.ndarray, b_world: np.ndarray) -> float:
    """Yaw of the world frame relative to the odometry frame from one
    geomagnetic reading (tilt is shared, both frames are gravity aligned)."""
    m = R_local @ b_body  # field in the odometry frame
    return float(np.arctan2(b_world[1], b_world[0]) - np.arctan2(m[1], m[0]))


def run_backend(ds: ScenarioDataset, front: FrontendResult, cfg: RunConfig) -> RunResult:
    t0 = time.perf_counter()
    cfg.validate()
    seed = ds.seed if cfg.seed is None else cfg.seed
    spec: DescriptorModelSpec = ORB_LIKE if cfg.rotation_aware_descriptors else BRIEF_LIKE
    vocab = default_vocabulary()
    lm = ds.world.landmarks
    ext = ds.world.extrinsics
    camera_from_body = ext.body_from_camera.inverse()
    b_world = ds.world.constants.geomagnetic_field_world
    sigma_mag = max(ds.noise.mag_noise_sigma, 1e-6)

    smap = MultiScaleMap(MapConfig(variation_threshold=cfg.variation_threshold, cluster_slack=cfg.cluster_slack))
    lcfg = cfg.loop_config()
    closer = LoopCloser(smap, vocab, camera_from_body, lcfg, seed)
    graph = PoseGraph(b_world, GraphConfig(huber_delta=cfg.huber_delta, loop_gate=cfg.loop_gate))
    geo_t, geo_b = front.geomagnetic
    sigs = front.signatures if cfg.use_alternating else []
    sig_t = np.array([s.t_center for s in sigs])
    next_sig = 0
    T_wl = Pose3.identity()
    since_solve = 0
    pending_loops = False

    def solve(trigger: str):
        sol = graph.optimize()
        graph.record_solve(sol, trigger)
        smap.update_world_poses(graph.poses)

    for k, rec in enumerate(front.records):
        # ---- visual submap
        obs = rec.observation
        rows = lm.rows(obs.ids)
        desc = describe_many(lm.descriptors[rows], lm.pattern_seed[rows], obs.rotation, obs.scale, spec,
                             _descriptor_rng(seed, rec.kf_id, 0))
        bow = vocab.bow_vector(desc)
        # ---- pose graph node
        if k == 0:
            if cfg.use_geomagnetic:
                b0 = _geomagnetic_at(geo_t, geo_b, rec.t)
                if b0 is not None:
                    T_wl = Pose3.from_rt(yaw_rotmat(_initial_yaw(b0, rec.pose_local.R, b_world)), np.zeros(3))
            pose_w = T_wl @ rec.pose_local
            graph.add_node(pose_w, rec.kf_id)
            yaw_sigma = np.pi if cfg.use_geomagnetic else 1e-3
            graph.set_prior(0, pose_w, [1e-3, 1e-3, 1e-3, 1e-3, 1e-3, yaw_sigma])
        else:
            e = front.edges[k - 1]
            pose_w = graph.poses[k - 1] @ e.relative
            graph.add_node(pose_w, rec.kf_id)
            graph.add_vio_edge(k - 1, k, e.relative, e.information * cfg.vio_info_scale)
        graph.add_tilt_edge(k, rec.state.R.T @ np.array([0.0, 0.0, 1.0]), np.eye(3) / cfg.tilt_sigma ** 2)
        if cfg.use_geomagnetic:
            b = _geomagnetic_at(geo_t, geo_b, rec.t)
            if b is not None:
                graph.add_magnetometer_edge(k, b, np.eye(3) / sigma_mag ** 2)
        smap.add_visual_submap(rec.kf_id, rec.t, rec.pose_local, obs.ids, obs.uv, desc, bow, graph.poses[k])
        # ---- magnetic submaps from signatures up to this keyframe
        while next_sig < len(sigs) and sig_t[next_sig] <= rec.t:
            s = sigs[next_sig]
            smap.add_magnetic_signature(s.t_center, s.alt_amplitude_enu, _interp_position(front.records, s.t_center))
            next_sig += 1
        since_solve += 1
        # ---- loop query
        q = front.queries.get(rec.kf_id)
        loops = []
        if q is not None:
            qpose, pts, feats = q
            qp = _query_points(pts, feats, lm, spec, cfg, _descriptor_rng(seed, rec.kf_id, 1))
            qsig = None
            if len(sigs):
                j = int(np.argmin(np.abs(sig_t - rec.t)))
                if abs(sig_t[j] - rec.t) < 1.0:
                    qsig = sigs[j].alt_amplitude_enu
            loops = closer.process(k, qpose, qp, qsig)
            for lp in loops:
                graph.add_loop_edge(k, lp.candidate, lp.relative, lp.information)
        pending_loops |= bool(loops)
        if pending_loops and since_solve >= cfg.loop_solve_gap:
            solve("loop")
            since_solve, pending_loops = 0, False
        elif since_solve >= cfg.reoptimize_every:
            solve("periodic")
            since_solve, pending_loops = 0, False
    smap.flush()
    if len(graph):
        solve("final")
    t = np.array([r.t for r in front.records])
    return RunResult(cfg, t, list(graph.poses), [r.pose_local for r in front.records], smap, closer, graph,
                     list(closer.loops), front.wall_time, time.perf_counter() - t0)


def _interp_position(records, t: float) -> np.ndarray:
    ts = [r.t for r in records]
    k = int(np.searchsorted(ts, t))
    if k <= 0:
        return records[0].pose_local.t.copy()
    if k >= len(records):
        return records[-1].pose_local.t.copy()
    a, b = records[k - 1], records[k]
    w = (t - a.t) / max(b.t - a.t, 1e-9)
    return (1 - w) * a.pose_local.t + w * b.pose_local.t


def _query_points(points: dict, feats: dict, lm, spec, cfg: RunConfig, rng) -> QueryPoints:
    fids = np.array(sorted(f for f in points if f in feats), dtype=np.int64)
    if len(fids) == 0:
        return QueryPoints(np.zeros((0, 3)), DescriptorSet(np.zeros((0, 32), dtype=np.uint8)), fids)
    rows = lm.rows(fids)
    rot = np.array([feats[f][0] for f in fids])
    scale = np.array([feats[f][1] for f in fids])
    resp = np.array([feats[f][2] for f in fids])
    ds = replicate_across_scales(lm.descriptors[rows], lm.pattern_seed[rows], rot, scale, resp, cfg.scale_levels,
                                 spec, rng, cfg.response_floor)
    pos = np.array([points[f] for f in fids])
    return QueryPoints(pos, ds, fids)


def run_pipeline(ds: ScenarioDataset, cfg: RunConfig, frontend: FrontendResult | None = None,
                 vio_cfg: VioConfig | None = None) -> RunResult:
    front = frontend or run_frontend(ds, cfg.use_sonar, vio_cfg)
    return run_backend(ds, front, cfg)


class FrontendCache:
    """Front ends keyed by (dataset identity, sonar toggle)."""

    def __init__(self):
        self._store: dict = {}

    def get(self, ds: ScenarioDataset, use_sonar: bool, vio_cfg: VioConfig | None = None) -> FrontendResult:
        key = (id(ds), use_sonar)
        if key not in self._store:
            self._store[key] = run_frontend(ds, use_sonar, vio_cfg)
        return self._store[key]


# --------------------------------------------------------------------------
# outputs
# --------------------------------------------------------------------------

TRAJECTORY_FILE = "trajectory.tum"
VIO_TRAJECTORY_FILE = "vio_trajectory.tum"
DECISION_LOG_FILE = "decision_log.csv"
MAP_FILE = "map.json"
MAG_CSV_FILE = "magnetic_submaps.csv"
GRAPH_STATS_FILE = "pose_graph_stats.csv"
RUN_INFO_FILE = "run_info.json"


def write_run(result: RunResult, out_dir, dataset_path: str = ""):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t, p, q = result.trajectory()
    write_tum(out / TRAJECTORY_FILE, t, p, q)
    t, p, q = result.local_trajectory()
    write_tum(out / VIO_TRAJECTORY_FILE, t, p, q)
    result.closer.write_log(out / DECISION_LOG_FILE)
    result.map.export_json(out / MAP_FILE)
    result.map.export_magnetic_csv(out / MAG_CSV_FILE)
    result.graph.write_stats_csv(out / GRAPH_STATS_FILE)
    info = {
        "dataset": str(dataset_path),
        "preset": preset_name(result.config),
        "config": result.config.to_dict(),
        "keyframes": int(len(result.keyframe_t)),
        "loops": [{"query": lp.query, "candidate": lp.candidate, "inliers": lp.inliers} for lp in result.loops],
        "verifications": result.closer.verifications,
        "edge_counts": result.graph.edge_counts(),
        "disabled_loop_edges": len(result.graph.disabled),
        "solves": len(result.graph.solves),
    }
    (out / RUN_INFO_FILE).write_text(json.dumps(_jsonable(info), indent=1, sort_keys=True) + "\n")


def preset_name(cfg: RunConfig) -> str:
    """Name of the preset whose toggles ``cfg`` carries, else ``custom``."""
    for name in ABLATION_ORDER:
        if all(getattr(cfg, k) == v for k, v in PRESETS[name].items()):
            return name
    return "custom"


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and not np.isfinite(x):
        return None
    if isinstance(x, np.generic):
        return x.item()
    return x
