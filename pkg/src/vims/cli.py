"""``vims`` command line: simulate, run, eval, ablate, report, vocab.

Exit codes: 0 ok, 2 configuration error, 3 estimator failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from vims.descriptors import default_vocabulary
from vims.evaluation import (InsufficientPairs, PRPoint, RunReport, associate, evaluate_trajectory, loop_correctness,
                             pr_curve, recognition_matrix, revisit_labels, scale_error, write_matrix_csv)
from vims.loop_closing import DecisionRow, read_decision_log
from vims.pipeline import (ABLATION_ORDER, DECISION_LOG_FILE, PRESETS, RUN_INFO_FILE, TOGGLES, TRAJECTORY_FILE,
                           VIO_TRAJECTORY_FILE, FrontendCache, RunConfig, run_backend, write_run)
from vims.pose_graph import GraphDiverged
from vims.sim.io import (TRUTH_FILE, DatasetIOError, load_dataset, load_scenario_config, parse_kv, read_tum,
                         save_dataset)
from vims.sim.scenario import FAMILIES, ConfigError, ScenarioConfig, generate_scenario
from vims.vio import EstimatorFailure, WindowDiverged

EXIT_OK, EXIT_CONFIG, EXIT_ESTIMATOR, EXIT_IO = 0, 2, 3, 4
REPORT_FILE = "report.json"
ABLATION_FILE = "ablation.csv"
ABLATION_SUMMARY_FILE = "ablation_summary.csv"
MODES = ("magnetic", "visual", "hierarchical")

ESTIMATOR_ERRORS = (EstimatorFailure, WindowDiverged, GraphDiverged)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    kv: dict = {}
    if getattr(args, "config", None):
        try:
            kv.update(parse_kv(Path(args.config).read_text()))
        except OSError as exc:
            raise DatasetIOError(f"cannot read run config {args.config}: {exc}") from exc
    preset = kv.pop("preset", None) or args.preset
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    base = {k: ("true" if v else "false") for k, v in PRESETS[preset].items()}
    base.update(kv)
    for item in args.toggles or []:
        for part in item.split(","):
            if not part.strip():
                continue
            key, sep, val = part.partition("=")
            key = key.strip()
            if key not in TOGGLES:
                raise ConfigError(f"unknown toggle {key!r}; toggles are {', '.join(TOGGLES)}")
            base[key] = val.strip() if sep else "true"
    if args.seed is not None:
        base["seed"] = str(args.seed)
    return RunConfig.from_dict(base)


def _truth_positions_at(t_est, truth):
    t_ref, p_ref, _ = truth
    ie, ir = associate(t_est, t_ref)
    if len(ie) != len(t_est):
        raise InsufficientPairs("keyframe stamps without ground truth")
    return p_ref[ir]


def query_decisions(log: list[DecisionRow]) -> dict[int, int]:
    """Per query: the accepted candidate with the highest BoW score."""
    out: dict[int, tuple] = {}
    for r in log:
        if r.verdict == "accepted":
            cur = out.get(r.query_idx)
            if cur is None or (r.bow_score, -r.candidate_idx) > cur:
                out[r.query_idx] = (r.bow_score, -r.candidate_idx)
    return {q: -v[1] for q, v in out.items()}


def configured_pr(log: list[DecisionRow], labels: list[set]) -> PRPoint:
    """Precision/recall of the run's own accepted loops (top-1 per query)."""
    dec = query_decisions(log)
    tp = fp = fn = 0
    for q, truth in enumerate(labels):
        d = dec.get(q)
        if d is not None and d in truth:
            tp += 1
        elif d is not None:
            fp += 1
            fn += bool(truth)
        elif truth:
            fn += 1
    return PRPoint(float("nan"), float("nan"), tp, fp, fn)


def evaluate_run(run_path, truth_path, preset: str = "") -> RunReport:
    """RunReport of a run directory (or a bare TUM trajectory) against truth."""
    run = Path(run_path)
    truth = read_tum(truth_path)
    traj_file = run / TRAJECTORY_FILE if run.is_dir() else run
    t, p, q = read_tum(traj_file)
    et, er, _ = evaluate_trajectory(t, p, q, *truth)
    rep = RunReport(preset=preset, trans_rmse=et, rot_rmse=er, n_keyframes=len(t))
    try:
        rep.scale_error = scale_error(t, p, truth[0], truth[1])
    except InsufficientPairs:
        pass
    if not run.is_dir():
        return rep
    info = {}
    if (run / RUN_INFO_FILE).exists():
        info = json.loads((run / RUN_INFO_FILE).read_text())
        rep.preset = preset or info.get("preset", "")
        rep.verifications = int(info.get("verifications", 0))
        rep.timing = {"keyframes": info.get("keyframes", len(t)), "solves": info.get("solves", 0),
                      "verifications": rep.verifications}
    if (run / VIO_TRAJECTORY_FILE).exists():
        tv, pv, qv = read_tum(run / VIO_TRAJECTORY_FILE)
        rep.vio_trans_rmse = evaluate_trajectory(tv, pv, qv, *truth)[0]
    if (run / DECISION_LOG_FILE).exists():
        log = read_decision_log(run / DECISION_LOG_FILE)
        gap = int(info.get("config", {}).get("exclusion_gap", 50))
        labels = revisit_labels(_truth_positions_at(t, truth), gap)
        rep.loops_correct, rep.loops_total = loop_correctness(log, labels)
        pt = configured_pr(log, labels)
        rep.precision, rep.recall, rep.f05 = pt.precision, pt.recall, pt.f05
    return rep


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    if args.config:
        cfg = load_scenario_config(args.config)
    else:
        cfg = ScenarioConfig.for_family(args.family)
    ds = generate_scenario(cfg, args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {args.out} ({cfg.family}, seed {args.seed}, {len(ds.ground_truth)} truth poses)")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _run_config(args)
    ds = load_dataset(args.dataset)
    res = run_backend(ds, FrontendCache().get(ds, cfg.use_sonar), cfg)
    write_run(res, args.out, dataset_path=Path(args.dataset).name)
    print(f"wrote {args.out}: {len(res.keyframe_t)} keyframes, {len(res.loops)} loop edges")
    return EXIT_OK


def cmd_eval(args) -> int:
    truth = args.truth
    if truth is None:
        raise ConfigError("--truth is required")
    rep = evaluate_run(args.run, truth, args.preset or "")
    text = rep.to_json() + "\n"
    out = Path(args.out) if args.out else (Path(args.run) / REPORT_FILE if Path(args.run).is_dir() else None)
    if out is not None:
        out.write_text(text)
    print(text, end="")
    return EXIT_OK


ABLATION_COLUMNS = ["dataset", "preset", "exit_code", "trans_rmse", "rot_rmse", "vio_trans_rmse", "loops_correct",
                    "loops_total", "precision", "recall", "f05"]


def _fmt(v):
    if isinstance(v, float):
        return "" if not np.isfinite(v) else f"{v:.6f}"
    return str(v)


def cmd_ablate(args) -> int:
    presets = args.presets.split(",") if args.presets else list(ABLATION_ORDER)
    for p in presets:
        if p not in PRESETS:
            raise ConfigError(f"unknown preset {p!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for dpath in args.dataset:
        ds = load_dataset(dpath)
        dname = Path(dpath).name
        truth = Path(dpath) / TRUTH_FILE
        cache = FrontendCache()
        for preset in presets:
            cfg = RunConfig.preset(preset)
            run_dir = out / dname / preset
            code = EXIT_OK
            try:
                res = run_backend(ds, cache.get(ds, cfg.use_sonar), cfg)
            except ESTIMATOR_ERRORS as exc:
                code = EXIT_ESTIMATOR
                run_dir.mkdir(parents=True, exist_ok=True)
                (run_dir / "failure.txt").write_text(f"{type(exc).__name__}: {exc}\n")
                rep = RunReport(preset=preset, status="failed")
            else:
                write_run(res, run_dir, dataset_path=dname)
                rep = evaluate_run(run_dir, truth, preset)
                (run_dir / REPORT_FILE).write_text(rep.to_json() + "\n")
            rows.append({"dataset": dname, "preset": preset, "exit_code": code, "trans_rmse": rep.trans_rmse,
                         "rot_rmse": rep.rot_rmse, "vio_trans_rmse": rep.vio_trans_rmse,
                         "loops_correct": rep.loops_correct, "loops_total": rep.loops_total,
                         "precision": rep.precision, "recall": rep.recall, "f05": rep.f05})
            print(f"{dname:>16s} {preset:>9s} exit {code} ATE {_fmt(rep.trans_rmse) or 'x':>9s} m  "
                  f"rot {_fmt(rep.rot_rmse) or 'x':>9s} deg  loops {rep.loops_correct}/{rep.loops_total}")
    with open(out / ABLATION_FILE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in ABLATION_COLUMNS])
    summary = ablation_summary(rows, presets)
    with open(out / ABLATION_SUMMARY_FILE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["preset", "runs", "failures", "median_trans_rmse", "median_rot_rmse"])
        for p in presets:
            s = summary[p]
            w.writerow([p, s["runs"], s["failures"], _fmt(s["trans"]), _fmt(s["rot"])])
    print(ordering_text(summary))
    return EXIT_OK


def ablation_summary(rows: list[dict], presets) -> dict:
    out = {}
    for p in presets:
        rs = [r for r in rows if r["preset"] == p]
        ok = [r for r in rs if r["exit_code"] == EXIT_OK]
        out[p] = {"runs": len(rs), "failures": len(rs) - len(ok),
                  "trans": float(np.median([r["trans_rmse"] for r in ok])) if ok else float("nan"),
                  "rot": float(np.median([r["rot_rmse"] for r in ok])) if ok else float("nan")}
    return out


def ordering_text(summary: dict) -> str:
    """Human-readable check of full <= single ablations <= vi_slam."""
    lines = []
    single = [p for p in ("wo_alter", "wo_orb", "wo_geom") if p in summary]
    if "full" in summary and "vi_slam" in summary:
        f, v = summary["full"]["trans"], summary["vi_slam"]["trans"]
        for p in single:
            a = summary[p]["trans"]
            ok = f <= a <= v
            lines.append(f"order full <= {p} <= vi_slam: {'yes' if ok else 'NO'} ({f:.4f} / {a:.4f} / {v:.4f})")
    live = {p: summary[p]["rot"] for p in single if np.isfinite(summary[p]["rot"])}
    if live:
        top = max(live, key=live.get)
        lines.append(f"largest rotation RMSE among ablations: {top} ({live[top]:.3f} deg)")
    return "\n".join(lines)


def cmd_report(args) -> int:
    run = Path(args.run)
    out = Path(args.out) if args.out else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    truth = read_tum(args.truth)
    t, p, q = read_tum(run / TRAJECTORY_FILE)
    _, _, al = evaluate_trajectory(t, p, q, *truth)
    series = {"estimate": al.apply_positions(p)}
    if (run / VIO_TRAJECTORY_FILE).exists():
        tv, pv, qv = read_tum(run / VIO_TRAJECTORY_FILE)
        series["vio"] = evaluate_trajectory(tv, pv, qv, *truth)[2].apply_positions(pv)
    series["truth"] = _truth_positions_at(t, truth)
    with open(out / "trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"{name}_{ax}" for name in series for ax in "xyz"])
        for k in range(len(t)):
            w.writerow([f"{t[k]:.6f}"] + [f"{series[name][k, a]:.6f}" for name in series for a in range(3)])
    log = read_decision_log(run / DECISION_LOG_FILE)
    info = json.loads((run / RUN_INFO_FILE).read_text()) if (run / RUN_INFO_FILE).exists() else {}
    gap = int(info.get("config", {}).get("exclusion_gap", 50))
    labels = revisit_labels(series["truth"], gap)
    with open(out / "pr_points.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "tau_mag", "tau_bow", "tp", "fp", "fn", "precision", "recall", "f05", "best"])
        for mode in MODES:
            pts, best = pr_curve(log, labels, mode)
            for pt in pts:
                w.writerow([mode, _fmt(float(pt.tau_mag)), _fmt(float(pt.tau_bow)), pt.tp, pt.fp, pt.fn,
                            _fmt(pt.precision), _fmt(pt.recall), _fmt(pt.f05), int(pt is best)])
    M = recognition_matrix(log, n=len(t), exclusion_gap=gap)
    write_matrix_csv(out / "recognition_matrix.csv", M, sorted({r.query_idx for r in log}))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_vocab(args) -> int:
    Path(args.out).write_text(default_vocabulary().to_json())
    print(f"wrote {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vims", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset and its ground truth")
    s.add_argument("--config", help="key = value scenario file")
    s.add_argument("--family", choices=FAMILIES, default="lawnmower", help="used when no --config is given")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("run", help="run SLAM on a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--preset", default="full", choices=sorted(PRESETS))
    s.add_argument("--toggles", action="append", help="e.g. use_sonar=false,use_geomagnetic=true")
    s.add_argument("--config", help="key = value run config (thresholds, toggles, preset)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("eval", help="score a run against ground truth")
    s.add_argument("--run", required=True, help="run directory or TUM trajectory")
    s.add_argument("--truth", help="ground-truth TUM file")
    s.add_argument("--preset")
    s.add_argument("--out", help="report path (default: <run>/report.json)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="run the ablation presets with paired noise")
    s.add_argument("--dataset", required=True, nargs="+")
    s.add_argument("--presets", help="comma list (default: all)")
    s.add_argument("--out", default="ablation")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", help="plot-ready CSVs for one run")
    s.add_argument("--run", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("vocab", help="export the shipped vocabulary as JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_vocab)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ESTIMATOR_ERRORS as exc:
        print(f"estimator failure: {exc}", file=sys.stderr)
        return EXIT_ESTIMATOR
    except InsufficientPairs as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetIOError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
