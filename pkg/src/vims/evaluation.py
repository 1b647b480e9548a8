"""Trajectory alignment, ATE, precision-recall over decision logs and the
recognition matrix."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from vims.geometry import quat_to_rotmat, rotmat_angle
from vims.loop_closing import DecisionRow

REVISIT_RADIUS = 1.0


class InsufficientPairs(ValueError):
    pass


# --------------------------------------------------------------------------
# alignment
# --------------------------------------------------------------------------

def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = False):
    """``(R, t, s)`` minimising ``sum |dst - (s R src + t)|^2``."""
    X = np.asarray(src, dtype=float)
    Y = np.asarray(dst, dtype=float)
    if len(X) < 3:
        raise InsufficientPairs(f"need >= 3 pairs, got {len(X)}")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    S = Yc.T @ Xc / len(X)
    U, d, Vt = np.linalg.svd(S)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    s = 1.0
    if with_scale:
        var = np.mean(np.sum(Xc ** 2, axis=1))
        s = float(np.trace(np.diag(d) @ D) / var)
    t = my - s * R @ mx
    return R, t, s


def associate(t_est: np.ndarray, t_ref: np.ndarray, tolerance: float = 0.05):
    """Index pairs matching each estimate to the nearest reference stamp."""
    t_est = np.asarray(t_est, dtype=float)
    t_ref = np.asarray(t_ref, dtype=float)
    if len(t_ref) == 0 or len(t_est) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    k = np.clip(np.searchsorted(t_ref, t_est), 1, len(t_ref) - 1) if len(t_ref) > 1 else np.zeros(len(t_est), int)
    if len(t_ref) > 1:
        left = k - 1
        k = np.where(np.abs(t_ref[left] - t_est) <= np.abs(t_ref[k] - t_est), left, k)
    ok = np.abs(t_ref[k] - t_est) <= tolerance
    return np.flatnonzero(ok), k[ok]


@dataclass
class Alignment:
    R: np.ndarray
    t: np.ndarray
    scale: float
    est_idx: np.ndarray
    ref_idx: np.ndarray

    def apply_positions(self, p: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(p) @ self.R.T + self.t


def align_trajectories(t_est, p_est, t_ref, p_ref, with_scale: bool = False, tolerance: float = 0.05) -> Alignment:
    ie, ir = associate(t_est, t_ref, tolerance)
    if len(ie) < 3:
        raise InsufficientPairs(f"only {len(ie)} associated pose pairs")
    R, t, s = umeyama(np.asarray(p_est)[ie], np.asarray(p_ref)[ir], with_scale)
    return Alignment(R, t, s, ie, ir)


def ate_rmse(p_est, q_est, p_ref, q_ref, alignment: Alignment | None = None) -> tuple[float, float]:
    """(translation m, rotation deg) RMSE over already associated rows.

    With an alignment, estimates are first mapped into the reference frame.
    """
    p_est = np.asarray(p_est, dtype=float).reshape(-1, 3)
    p_ref = np.asarray(p_ref, dtype=float).reshape(-1, 3)
    if len(p_est) == 0:
        return 0.0, 0.0
    R_al = np.eye(3) if alignment is None else alignment.R
    p = p_est if alignment is None else alignment.apply_positions(p_est)
    et = np.sqrt(np.mean(np.sum((p - p_ref) ** 2, axis=1)))
    ang = []
    for qe, qr in zip(q_est, q_ref):
        Re = R_al @ quat_to_rotmat(qe)
        ang.append(rotmat_angle(quat_to_rotmat(qr).T @ Re))
    er = np.degrees(np.sqrt(np.mean(np.square(ang))))
    return float(et), float(er)


def evaluate_trajectory(t_est, p_est, q_est, t_ref, p_ref, q_ref, with_scale: bool = False):
    al = align_trajectories(t_est, p_est, t_ref, p_ref, with_scale)
    ie, ir = al.est_idx, al.ref_idx
    et, er = ate_rmse(np.asarray(p_est)[ie], np.asarray(q_est)[ie], np.asarray(p_ref)[ir], np.asarray(q_ref)[ir], al)
    return et, er, al


def scale_error(t_est, p_est, t_ref, p_ref) -> float:
    """Relative scale of the estimate against truth, ``|1/s - 1|`` where ``s``
    is the Sim(3) alignment scale taking the estimate onto the reference."""
    al = align_trajectories(t_est, p_est, t_ref, p_ref, with_scale=True)
    return abs(1.0 / al.scale - 1.0)


# --------------------------------------------------------------------------
# precision / recall
# --------------------------------------------------------------------------

def f_beta(precision: float, recall: float, beta: float = 0.5) -> float:
    if precision <= 0.0 and recall <= 0.0:
        return 0.0
    b2 = beta * beta
    den = b2 * precision + recall
    return 0.0 if den <= 0 else (1.0 + b2) * precision * recall / den


@dataclass
class PRPoint:
    tau_mag: float
    tau_bow: float
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return 1.0 if self.tp + self.fp == 0 else self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> float:
        pos = self.tp + self.fn
        return 1.0 if pos == 0 else self.tp / pos

    @property
    def f05(self) -> float:
        return f_beta(self.precision, self.recall, 0.5)


def revisit_labels(positions: np.ndarray, exclusion_gap: int, radius: float = REVISIT_RADIUS):
    """For each query index: set of eligible earlier indices within ``radius``."""
    P = np.asarray(positions, dtype=float)
    out = []
    for q in range(len(P)):
        lim = q - exclusion_gap
        if lim <= 0:
            out.append(set())
            continue
        d = np.linalg.norm(P[:lim] - P[q], axis=1)
        out.append(set(np.flatnonzero(d < radius).tolist()))
    return out


def _queries(log: list[DecisionRow]) -> dict[int, list[DecisionRow]]:
    out: dict[int, list[DecisionRow]] = {}
    for r in log:
        out.setdefault(r.query_idx, []).append(r)
    return out


def decide(rows: list[DecisionRow], mode: str, tau_mag: float, tau_bow: float) -> int | None:
    """Top-1 recognition decision of one query under thresholds, or None."""
    rows = [r for r in rows if r.candidate_idx >= 0]
    if mode == "magnetic":
        top = [r for r in rows if r.mag_rank == 0 and r.tied]
        if top and top[0].mag_dist <= tau_mag:
            return top[0].candidate_idx
        return None
    if mode == "visual":
        pool = rows
    elif mode == "hierarchical":
        pool = [r for r in rows if r.mag_dist <= tau_mag]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if not pool:
        return None
    best = max(pool, key=lambda r: (r.bow_score, -r.candidate_idx))
    return best.candidate_idx if best.bow_score >= tau_bow else None


def pr_point(log: list[DecisionRow], labels: list[set], mode: str, tau_mag: float, tau_bow: float) -> PRPoint:
    tp = fp = fn = 0
    by_q = _queries(log)
    for q, truth in enumerate(labels):
        rows = by_q.get(q, [])
        d = decide(rows, mode, tau_mag, tau_bow) if rows else None
        if d is not None and d in truth:
            tp += 1
        elif d is not None:
            fp += 1
            if truth:
                fn += 1
        elif truth:
            fn += 1
    return PRPoint(tau_mag, tau_bow, tp, fp, fn)


def pr_curve(log: list[DecisionRow], labels: list[set], mode: str, mag_grid=None, bow_grid=None):
    """Sweep thresholds; returns (points, best point by F0.5).

    ``magnetic`` sweeps ``tau_mag`` only, ``visual`` sweeps ``tau_bow`` only,
    ``hierarchical`` sweeps both jointly (a precision-recall region).
    """
    mags = [r.mag_dist for r in log if np.isfinite(r.mag_dist)]
    bows = [r.bow_score for r in log if r.candidate_idx >= 0]
    if mag_grid is None:
        mag_grid = np.unique(np.concatenate([[0.0], np.quantile(mags, np.linspace(0, 1, 41)) if mags else [], [np.inf]]))
    if bow_grid is None:
        bow_grid = np.unique(np.concatenate([[0.0], np.quantile(bows, np.linspace(0, 1, 41)) if bows else [], [1.01]]))
    pts = []
    if mode == "magnetic":
        pts = [pr_point(log, labels, mode, float(m), 0.0) for m in mag_grid]
    elif mode == "visual":
        pts = [pr_point(log, labels, mode, np.inf, float(b)) for b in bow_grid]
    else:
        pts = [pr_point(log, labels, mode, float(m), float(b)) for m in mag_grid for b in bow_grid]
    best = max(pts, key=lambda p: (p.f05, p.precision)) if pts else None
    return pts, best


def loop_correctness(log: list[DecisionRow], labels: list[set]) -> tuple[int, int]:
    """(correct, total) over accepted loops."""
    correct = total = 0
    for r in log:
        if r.verdict == "accepted":
            total += 1
            if r.candidate_idx in labels[r.query_idx]:
                correct += 1
    return correct, total


def recognition_matrix(log: list[DecisionRow], n: int | None = None, exclusion_gap: int = 50) -> np.ndarray:
    """(queries x history) matrix of final similarity decisions: the BoW score
    of accepted loops, 0 elsewhere; the exclusion band ``x >= y - gap`` is NaN."""
    if not log:
        return np.zeros((0, 0))
    qs = sorted({r.query_idx for r in log})
    size = n if n is not None else max(max(qs), max(r.candidate_idx for r in log)) + 1
    M = np.zeros((len(qs), size))
    row_of = {q: k for k, q in enumerate(qs)}
    for q in qs:
        M[row_of[q], max(0, q - exclusion_gap):] = np.nan
    for r in log:
        if r.verdict == "accepted" and r.candidate_idx >= 0:
            M[row_of[r.query_idx], r.candidate_idx] = max(r.bow_score, 1e-9)
    return M


def write_matrix_csv(path, M: np.ndarray, query_ids=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query"] + [str(k) for k in range(M.shape[1])])
        ids = query_ids if query_ids is not None else range(M.shape[0])
        for q, row in zip(ids, M):
            w.writerow([q] + ["" if np.isnan(x) else f"{x:.6f}" for x in row])


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

@dataclass
class RunReport:
    preset: str = ""
    status: str = "ok"
    trans_rmse: float = float("nan")
    rot_rmse: float = float("nan")
    vio_trans_rmse: float = float("nan")
    scale_error: float = float("nan")
    loops_correct: int = 0
    loops_total: int = 0
    verifications: int = 0
    precision: float = float("nan")
    recall: float = float("nan")
    f05: float = float("nan")
    n_keyframes: int = 0
    timing: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.loops_correct > self.loops_total:
            raise ValueError("correct loops exceed total")

    def to_json(self) -> str:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and not np.isfinite(v):
                d[k] = None
        return json.dumps(d, indent=1, sort_keys=True)
