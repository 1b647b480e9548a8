"""Dataset persistence: JSON-lines event log, TUM ground truth, key = value configs.

Layout of a dataset directory::

    dataset.jsonl          header line, then one event per line in time order
    groundtruth.tum        t tx ty tz qx qy qz qw
    groundtruth_velocity.txt   t vx vy vz
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from vims.measurements import FrameObservation, ImuStream, MagStream, SonarStream
from vims.sim.scenario import ConfigError, GroundTruth, ScenarioConfig, ScenarioDataset, build_world
from vims.sim.world import LandmarkField

FORMAT_VERSION = 1
DATASET_FILE = "dataset.jsonl"
TRUTH_FILE = "groundtruth.tum"
VELOCITY_FILE = "groundtruth_velocity.txt"


class DatasetIOError(OSError):
    pass


# --------------------------------------------------------------------------
# key = value config files
# --------------------------------------------------------------------------

def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def format_kv(d: dict) -> str:
    lines = []
    for k, v in d.items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def load_scenario_config(path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DatasetIOError(f"cannot read config {path}: {exc}") from exc
    kv = parse_kv(text)
    family = kv.pop("family", "lawnmower")
    base = ScenarioConfig.for_family(family).to_dict()
    unknown = set(kv) - set(base)
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    base.update(kv)
    return ScenarioConfig.from_dict(base)


def save_scenario_config(config: ScenarioConfig, path):
    Path(path).write_text(format_kv(config.to_dict()))


# --------------------------------------------------------------------------
# TUM trajectories
# --------------------------------------------------------------------------

def write_tum(path, t, positions, quats_wxyz):
    """Write ``t tx ty tz qx qy qz qw`` rows with 9 decimals."""
    rows = []
    for ti, p, q in zip(t, positions, quats_wxyz):
        vals = (ti, p[0], p[1], p[2], q[1], q[2], q[3], q[0])
        rows.append(" ".join(f"{v:.9f}" for v in vals))
    Path(path).write_text("\n".join(rows) + ("\n" if rows else ""))


def read_tum(path):
    """Returns (t, positions, quats) with quaternions as w, x, y, z."""
    try:
        data = np.loadtxt(path, comments="#", ndmin=2)
    except OSError as exc:
        raise DatasetIOError(f"cannot read trajectory {path}: {exc}") from exc
    if data.size == 0:
        return np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4))
    if data.shape[1] != 8:
        raise DatasetIOError(f"{path}: expected 8 columns, found {data.shape[1]}")
    q = data[:, [7, 4, 5, 6]]
    return data[:, 0], data[:, 1:4], q


# --------------------------------------------------------------------------
# event log
# --------------------------------------------------------------------------

def _floats(a) -> list:
    return [float(x) for x in np.ravel(a)]


def _header(ds: ScenarioDataset) -> dict:
    lm = ds.world.landmarks
    return {
        "type": "header",
        "version": FORMAT_VERSION,
        "seed": ds.seed,
        "config": ds.config.to_dict(),
        "landmarks": {
            "ids": [int(i) for i in lm.ids],
            "positions": _floats(lm.positions),
            "saliency": _floats(lm.saliency),
            "descriptors": [bytes(d).hex() for d in lm.descriptors],
            "orientation": _floats(lm.orientation),
            "pattern_seed": [int(s) for s in lm.pattern_seed],
        },
    }


def _event_line(kind: str, s) -> dict:
    if kind == "imu":
        return {"t": s.t, "type": "imu", "acc": _floats(s.acc), "gyro": _floats(s.gyro)}
    if kind == "mag":
        return {"t": s.t, "type": "mag", "field": _floats(s.field_body)}
    if kind == "sonar":
        return {"t": s.t, "type": "sonar", "range": s.range}
    return {"t": s.t, "type": "frame", "ids": [int(i) for i in s.ids], "uv": _floats(s.uv),
            "rotation": _floats(s.rotation), "scale": _floats(s.scale), "response": _floats(s.response)}


def save_dataset(ds: ScenarioDataset, out_dir):
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / DATASET_FILE, "w") as fh:
            fh.write(json.dumps(_header(ds), separators=(",", ":")) + "\n")
            for t, kind, sample in ds.events():
                fh.write(json.dumps(_event_line(kind, sample), separators=(",", ":")) + "\n")
        gt = ds.ground_truth
        write_tum(out / TRUTH_FILE, gt.t, gt.position, gt.quat)
        rows = [" ".join(f"{v:.9f}" for v in (t, *vel)) for t, vel in zip(gt.t, gt.velocity)]
        (out / VELOCITY_FILE).write_text("\n".join(rows) + "\n")
    except OSError as exc:
        raise DatasetIOError(f"cannot write dataset to {out}: {exc}") from exc


def load_dataset(path) -> ScenarioDataset:
    root = Path(path)
    if root.is_file():
        root = root.parent
    try:
        fh = open(root / DATASET_FILE)
    except OSError as exc:
        raise DatasetIOError(f"cannot open dataset in {root}: {exc}") from exc
    with fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise DatasetIOError(f"corrupt dataset header in {root}") from exc
        if header.get("type") != "header" or header.get("version") != FORMAT_VERSION:
            raise DatasetIOError(f"unsupported dataset header in {root}")
        imu_t, imu_a, imu_g, mag_t, mag_b, son_t, son_r, frames = [], [], [], [], [], [], [], []
        for line in fh:
            e = json.loads(line)
            kind = e["type"]
            if kind == "imu":
                imu_t.append(e["t"])
                imu_a.append(e["acc"])
                imu_g.append(e["gyro"])
            elif kind == "mag":
                mag_t.append(e["t"])
                mag_b.append(e["field"])
            elif kind == "sonar":
                son_t.append(e["t"])
                son_r.append(e["range"])
            elif kind == "frame":
                frames.append(FrameObservation(
                    e["t"], np.array(e["ids"], dtype=np.int64), np.array(e["uv"]).reshape(-1, 2),
                    np.array(e["rotation"]), np.array(e["scale"]), np.array(e["response"])))
            else:
                raise DatasetIOError(f"unknown event type {kind!r}")

    config = ScenarioConfig.from_dict(header["config"])
    seed = int(header["seed"])
    world = build_world(config, seed)
    lmh = header["landmarks"]
    world.landmarks = LandmarkField(
        np.array(lmh["ids"], dtype=np.int64),
        np.array(lmh["positions"]).reshape(-1, 3),
        np.array(lmh["saliency"]),
        np.array([np.frombuffer(bytes.fromhex(h), dtype=np.uint8) for h in lmh["descriptors"]]).reshape(-1, 32),
        np.array(lmh["orientation"]),
        np.array(lmh["pattern_seed"], dtype=np.int64),
    )
    t, pos, quat = read_tum(root / TRUTH_FILE)
    vel_path = root / VELOCITY_FILE
    vel = np.loadtxt(vel_path, ndmin=2)[:, 1:4] if vel_path.exists() else np.zeros_like(pos)
    gt = GroundTruth(t, pos, quat, vel)
    return ScenarioDataset(
        config, seed, world,
        ImuStream(np.array(imu_t), np.array(imu_a).reshape(-1, 3), np.array(imu_g).reshape(-1, 3)),
        MagStream(np.array(mag_t), np.array(mag_b).reshape(-1, 3)),
        SonarStream(np.array(son_t), np.array(son_r)),
        frames, gt)
