"""Hierarchical place recognition and loop verification.

A query visual submap first selects the magnetic submaps whose signatures are
closest to its own; only visual submaps clustered around those are scored
with bag-of-words, and only those above the score threshold are checked
geometrically (2NN matching, PnP + RANSAC, then a covisibility consistency
test against the candidate's neighbouring keyframes).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from vims.descriptors import (DescriptorSet, PnPFailure, VocabularyTree, bow_score, match_2nn, pnp_ransac)
from vims.geometry import Pose3, rotmat_angle
from vims.mapping import MagneticSubmap, MultiScaleMap

STAGES = ("magnetic", "bow", "matching", "pnp", "covisibility", "verified")
LOG_COLUMNS = ("query_idx", "candidate_idx", "mag_dist", "bow_score", "stage_reached", "verdict",
               "mag_idx", "mag_rank", "tied")


@dataclass
class LoopConfig:
    k_m: int = 3
    tau_mag: float | None = None  # None = tau_mag_scale x running signature noise
    tau_mag_scale: float = 3.0
    tau_mag_fallback: float = 0.05  # microtesla, before any noise estimate exists
    tau_bow: float = 0.05
    exclusion_gap: int = 50
    min_inliers: int = 12
    min_matchable: int = 20
    ratio: float = 0.7
    ransac_iterations: int = 200
    inlier_threshold: float = 0.01
    covis_rotation_deg: float = 5.0
    covis_translation: float = 0.5
    covis_neighbors: int = 2
    max_candidates: int = 10
    hierarchical: bool = True
    loop_sigma_t: float = 0.05
    loop_sigma_r: float = 0.01


@dataclass
class LoopCandidate:
    query: int
    candidate: int
    mag_dist: float
    bow_score: float
    mag_idx: int = -1
    mag_rank: int = -1
    tied: bool = False


@dataclass
class VerifiedLoop:
    query: int
    candidate: int
    relative: Pose3  # query body <- candidate body, from the query's local frame
    information: np.ndarray
    inliers: int
    candidate_pose_local: Pose3 | None = None


@dataclass
class Rejection:
    stage: str
    reason: str


@dataclass
class QueryPoints:
    """3-D points of the query window in the odometry frame, with descriptors
    (``descriptors.point`` indexes ``positions``)."""

    positions: np.ndarray
    descriptors: DescriptorSet
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_points(self) -> int:
        return len(self.positions)


@dataclass
class DecisionRow:
    query_idx: int
    candidate_idx: int
    mag_dist: float
    bow_score: float
    stage_reached: str
    verdict: str
    mag_idx: int = -1
    mag_rank: int = -1
    tied: int = 0

    def as_list(self) -> list:
        md = "" if not np.isfinite(self.mag_dist) else f"{self.mag_dist:.9f}"
        return [self.query_idx, self.candidate_idx, md, f"{self.bow_score:.9f}", self.stage_reached,
                self.verdict, self.mag_idx, self.mag_rank, self.tied]


# --------------------------------------------------------------------------
# recognition
# --------------------------------------------------------------------------

def magnetic_distance(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))


def current_tau_mag(smap: MultiScaleMap, cfg: LoopConfig) -> float:
    if cfg.tau_mag is not None:
        return float(cfg.tau_mag)
    noise = smap.signature_noise()
    return cfg.tau_mag_fallback if not np.isfinite(noise) else cfg.tau_mag_scale * noise


def magnetic_gate(query_signature, smap: MultiScaleMap, query_idx: int, cfg: LoopConfig,
                  tau: float | None = None) -> list[tuple[MagneticSubmap, float]]:
    """The ``k_m`` eligible magnetic submaps nearest in signature, within ``tau``."""
    tau = current_tau_mag(smap, cfg) if tau is None else tau
    ranked = ranked_magnetic(query_signature, smap, query_idx, cfg)
    return [(m, d) for m, d in ranked[:cfg.k_m] if d <= tau]


def ranked_magnetic(query_signature, smap: MultiScaleMap, query_idx: int, cfg: LoopConfig):
    limit = query_idx - cfg.exclusion_gap
    elig = [m for m in smap.magnetic if m.tied_visual < limit]
    if not elig or query_signature is None:
        return []
    A = np.array([m.amplitude for m in elig])
    d = np.linalg.norm(A - np.asarray(query_signature, dtype=float), axis=1)
    order = np.lexsort((np.arange(len(elig)), d))
    return [(elig[k], float(d[k])) for k in order]


def visual_shortlist(query_idx: int, query_bow: dict, gated: list[tuple[MagneticSubmap, float]],
                     smap: MultiScaleMap, cfg: LoopConfig) -> list[LoopCandidate]:
    """Bag-of-words candidates inside the gated clusters scoring at least ``tau_bow``."""
    limit = query_idx - cfg.exclusion_gap
    best: dict[int, LoopCandidate] = {}
    for rank, (m, d) in enumerate(gated):
        for v in smap.cluster(m.index):
            if v >= limit:
                continue
            c = best.get(v)
            if c is None or d < c.mag_dist:
                best[v] = LoopCandidate(query_idx, v, d, 0.0, m.index, rank, v == m.tied_visual)
    out = []
    for v, c in best.items():
        c.bow_score = bow_score(query_bow, smap.visual[v].bow)
        if c.bow_score >= cfg.tau_bow:
            out.append(c)
    out.sort(key=lambda c: (-c.bow_score, c.candidate))
    return out


def global_scores(query_idx: int, query_bow: dict, smap: MultiScaleMap, cfg: LoopConfig) -> np.ndarray:
    limit = max(0, query_idx - cfg.exclusion_gap)
    return np.array([bow_score(query_bow, smap.visual[v].bow) for v in range(limit)])


# --------------------------------------------------------------------------
# verification
# --------------------------------------------------------------------------

def _matched_points(query: QueryPoints, target_desc: np.ndarray, cfg: LoopConfig):
    pairs = match_2nn(query.descriptors.bits, target_desc, cfg.ratio)
    if len(pairs) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    pts = query.descriptors.point[pairs[:, 0]]
    d = np.bitwise_count(query.descriptors.bits[pairs[:, 0]] ^ target_desc[pairs[:, 1]]).sum(axis=1)
    # one match per 3-D point (its best level) and per target feature
    order = np.lexsort((pairs[:, 1], d))
    seen_p, seen_t, keep = set(), set(), []
    for k in order:
        p, t = int(pts[k]), int(pairs[k, 1])
        if p in seen_p or t in seen_t:
            continue
        seen_p.add(p)
        seen_t.add(t)
        keep.append(k)
    keep = np.array(sorted(keep), dtype=int)
    return pts[keep], pairs[keep, 1]


def locate_candidate(query: QueryPoints, uv: np.ndarray, desc: np.ndarray, camera_from_body: Pose3,
                     cfg: LoopConfig, seed: int):
    """Body pose of a keyframe in the query's odometry frame, or a Rejection."""
    p_idx, t_idx = _matched_points(query, desc, cfg)
    if len(p_idx) < cfg.min_inliers:
        return Rejection("matching", f"{len(p_idx)} matched points < {cfg.min_inliers}")
    try:
        res = pnp_ransac(query.positions[p_idx], uv[t_idx], cfg.ransac_iterations, cfg.inlier_threshold,
                         cfg.min_inliers, seed)
    except PnPFailure as exc:
        return Rejection("pnp", str(exc))
    # res.pose: camera <- local;  body pose in local = (camera <- local)^-1 (camera <- body)
    pose = res.pose.inverse() @ camera_from_body
    return pose, res.n_inliers


def verify_loop(query: QueryPoints, query_pose_local: Pose3, candidate_idx: int, smap: MultiScaleMap,
                camera_from_body: Pose3, cfg: LoopConfig, seed: int = 0, query_idx: int = -1,
                cache: dict | None = None):
    """Returns a VerifiedLoop or a Rejection naming the failed stage.

    Keyframe ``n`` is located with RANSAC seed ``seed + n``; pass the same
    ``cache`` dict for all candidates of one query so that shared
    neighbours are located only once.
    """
    if query.n_points < cfg.min_matchable:
        return Rejection("matching", f"{query.n_points} matchable points < {cfg.min_matchable}")
    cache = {} if cache is None else cache

    def locate(n):
        if n not in cache:
            kf = smap.visual[n]
            cache[n] = locate_candidate(query, kf.uv, kf.descriptors, camera_from_body, cfg, seed + n)
        return cache[n]

    cand = smap.visual[candidate_idx]
    located = locate(candidate_idx)
    if isinstance(located, Rejection):
        return located
    pose_c, inliers = located
    # covisibility: neighbours located the same way must agree with the
    # odometry's relative poses around the candidate
    agree = 0
    for off in range(-cfg.covis_neighbors, cfg.covis_neighbors + 1):
        n = candidate_idx + off
        if off == 0 or n < 0 or n >= len(smap.visual) or (query_idx >= 0 and n >= query_idx - cfg.exclusion_gap // 2):
            continue
        nb = smap.visual[n]
        loc = locate(n)
        if isinstance(loc, Rejection):
            continue
        pose_n = loc[0]
        measured = pose_c.inverse() @ pose_n
        odom = cand.pose_local.inverse() @ nb.pose_local
        dR = np.degrees(rotmat_angle(measured.R.T @ odom.R))
        dt = float(np.linalg.norm(measured.t - odom.t))
        if dR > cfg.covis_rotation_deg or dt > cfg.covis_translation:
            return Rejection("covisibility", f"neighbour {n} disagrees ({dR:.2f} deg, {dt:.3f} m)")
        agree += 1
    if agree == 0:
        return Rejection("covisibility", "no covisible neighbour confirmed the candidate")
    scale = inliers / cfg.min_inliers
    info = np.diag([cfg.loop_sigma_t ** -2] * 3 + [cfg.loop_sigma_r ** -2] * 3) * scale
    rel = query_pose_local.inverse() @ pose_c
    return VerifiedLoop(query_idx, candidate_idx, rel, info, inliers, pose_c)


# --------------------------------------------------------------------------
# the closer
# --------------------------------------------------------------------------

class LoopCloser:
    """Stateful driver: one ``process`` call per query keyframe."""

    def __init__(self, smap: MultiScaleMap, vocab: VocabularyTree, camera_from_body: Pose3,
                 config: LoopConfig | None = None, seed: int = 0):
        self.map = smap
        self.vocab = vocab
        self.camera_from_body = camera_from_body
        self.config = config or LoopConfig()
        self.seed = seed
        self.log: list[DecisionRow] = []
        self.loops: list[VerifiedLoop] = []
        self.verifications = 0

    def process(self, query_idx: int, query_pose_local: Pose3, query_points: QueryPoints,
                query_signature=None) -> list[VerifiedLoop]:
        cfg = self.config
        smap = self.map
        if query_idx - cfg.exclusion_gap <= 0:
            return []
        qbow = smap.visual[query_idx].bow
        g_scores = global_scores(query_idx, qbow, smap, cfg)
        g_best = int(np.argmax(g_scores)) if len(g_scores) else -1
        rows: dict[int, DecisionRow] = {}

        if cfg.hierarchical:
            tau = current_tau_mag(smap, cfg)
            ranked = ranked_magnetic(query_signature, smap, query_idx, cfg)[:cfg.k_m]
            # every cluster member of the top-k_m submaps is logged, gated or not,
            # so thresholds can be swept from the log alone
            limit = query_idx - cfg.exclusion_gap
            for rank, (m, d) in enumerate(ranked):
                for v in smap.cluster(m.index):
                    if v >= limit:
                        continue
                    r = rows.get(v)
                    if r is None or d < r.mag_dist:
                        rows[v] = DecisionRow(query_idx, v, d, float(g_scores[v]), "magnetic", "rejected",
                                              m.index, rank, int(v == m.tied_visual))
            gated = [(m, d) for m, d in ranked if d <= tau]
            shortlist = visual_shortlist(query_idx, qbow, gated, smap, cfg)
            for v, r in rows.items():
                if r.mag_dist <= tau:
                    r.stage_reached = "bow"
        else:
            order = np.lexsort((np.arange(len(g_scores)), -g_scores))
            shortlist = [LoopCandidate(query_idx, int(v), float("inf"), float(g_scores[v]))
                         for v in order if g_scores[v] >= cfg.tau_bow]
        if g_best >= 0 and g_best not in rows:
            rows[g_best] = DecisionRow(query_idx, g_best, float("inf"), float(g_scores[g_best]),
                                       "magnetic" if cfg.hierarchical else "bow", "rejected")

        accepted = []
        located: dict = {}
        for c in shortlist[:cfg.max_candidates]:
            if cfg.hierarchical:
                assert c.candidate in rows and rows[c.candidate].mag_dist <= current_tau_mag(smap, cfg), \
                    "candidate outside the magnetic gate"
            row = rows.get(c.candidate)
            if row is None:
                row = rows[c.candidate] = DecisionRow(query_idx, c.candidate, c.mag_dist, c.bow_score, "bow",
                                                      "rejected")
            self.verifications += 1
            res = verify_loop(query_points, query_pose_local, c.candidate, smap, self.camera_from_body, cfg,
                              self.seed * 1_000_003 + query_idx * 1009, query_idx, located)
            if isinstance(res, Rejection):
                row.stage_reached = res.stage
                continue
            row.stage_reached = "verified"
            row.verdict = "accepted"
            accepted.append(res)
        if not rows:
            rows[-1] = DecisionRow(query_idx, -1, float("inf"), 0.0, "magnetic", "no_candidate")
        self.log.extend(rows[k] for k in sorted(rows))
        self.loops.extend(accepted)
        return accepted

    def write_log(self, path):
        write_decision_log(path, self.log)


def write_decision_log(path, rows: list[DecisionRow]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow(r.as_list())


def read_decision_log(path) -> list[DecisionRow]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            md = rec["mag_dist"]
            out.append(DecisionRow(int(rec["query_idx"]), int(rec["candidate_idx"]),
                                   float(md) if md else float("inf"), float(rec["bow_score"]),
                                   rec["stage_reached"], rec["verdict"], int(rec.get("mag_idx", -1) or -1),
                                   int(rec.get("mag_rank", -1) or -1), int(rec.get("tied", 0) or 0)))
    return out
