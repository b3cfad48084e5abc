"""Command line entry point: ``depthfusion {simulate,run,eval,gain-study}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, dump_config, load_config
from .covariance import read_covariance_csv
from .iekf import discrete_gain, stationary_gain
from .pipeline import MODES, evaluate, read_report, run_pipeline, wall_discrepancy, write_report
from .simulator import SCENES, TrajectoryScript, corrupt_scan, load_run, make_run, make_scene, save_run

log = logging.getLogger("depthfusion")


def _config(path) -> Config:
    return load_config(path) if path else Config()


def cmd_simulate(args) -> int:
    cfg = _config(args.config)
    if args.gyro_noise is not None:
        cfg.sim.gyro_noise_std = np.radians(args.gyro_noise)
    if args.gyro_bias is not None:
        cfg.sim.gyro_bias = tuple(np.radians(args.gyro_bias))
    script = TrajectoryScript(args.script, args.duration, np.radians(args.yaw_rate))
    run = make_run(make_scene(args.scene, args.seed), script, cfg.sim, args.seed)
    if args.corrupt_scan is not None:
        run = corrupt_scan(run, args.corrupt_scan, args.seed)
    out = save_run(run, args.out)
    print(f"{len(run.scans)} scans, {len(run.gyro_t)} gyro samples -> {out}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args.config)
    run = load_run(args.input)
    report = run_pipeline(run, cfg, args.mode)
    out = write_report(report, args.out)
    (out / "config.txt").write_text(dump_config(cfg))
    m = evaluate(report)
    print(f"mode {args.mode}: {len(report.records)} scans, {m.rejected} rejected, "
          f"final yaw error {m.final_yaw_error_deg:.3f} deg -> {out}")
    return 0


def _metric_rows(report_dir):
    report = read_report(report_dir)
    m = evaluate(report)
    rows = dict(m.summary())
    if report.last_cloud is not None:
        rows["wall_discrepancy_m"] = wall_discrepancy(report)
    return report, m, rows


def _write_series(path, report, m) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "err_rx_deg", "err_ry_deg", "err_rz_deg", "err_angle_deg", "err_trans_m", "valid"])
        for r, a, tot, tr in zip(report.records, m.angle_error_deg, m.total_angle_error_deg, m.translation_error_m):
            w.writerow([f"{r.t:.9g}", *(f"{v:.9g}" for v in a), f"{tot:.9g}", f"{tr:.9g}", int(r.valid)])


def cmd_eval(args) -> int:
    report, m, rows = _metric_rows(args.report)
    series = Path(args.out) if args.out else Path(args.report) / "errors.csv"
    _write_series(series, report, m)
    base = None
    if args.baseline:
        base_report, bm, base = _metric_rows(args.baseline)
        _write_series(Path(args.baseline) / "errors.csv", base_report, bm)
    name_w = max(len(k) for k in rows)
    header = f"{'metric':<{name_w}}  {report.mode:>12}"
    if base is not None:
        header += f"  {base_report.mode + ' (base)':>14}"
    print(header)
    for k, v in rows.items():
        line = f"{k:<{name_w}}  {v:>12.6g}"
        if base is not None:
            line += f"  {base.get(k, float('nan')):>14.6g}"
        print(line)
    return 0


def _read_matrix(path) -> np.ndarray:
    m, _ = read_covariance_csv(path)
    if m.shape != (6, 6):
        raise ValueError(f"{path}: expected a 6x6 matrix")
    return m


def cmd_gain_study(args) -> int:
    m = _read_matrix(args.m)
    n = _read_matrix(args.n)
    # a per-second observation density N becomes N / dt for one sample every dt
    n_step = n if args.discrete_n else n / args.dt
    k_inf = stationary_gain(m, n)
    p = np.eye(6) * args.p0
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["step", "rel_err"] + [f"k{i}{j}" for i in range(6) for j in range(6)])
        rel = float("nan")
        for step in range(1, args.steps + 1):
            k, p = discrete_gain(p, n_step, m, args.dt)
            rel = float(np.linalg.norm(k - k_inf) / np.linalg.norm(k_inf))
            if step % args.every == 0 or step == args.steps:
                w.writerow([step, f"{rel:.9g}"] + [f"{v:.12g}" for v in k.ravel()])
    finally:
        if out is not sys.stdout:
            out.close()
    print("stationary gain (M N^-1)^1/2:", file=sys.stderr)
    np.savetxt(sys.stderr, k_inf, fmt="% .6e")
    print(f"relative Frobenius distance after {args.steps} steps: {rel:.3e}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="depthfusion", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic sensor run")
    s.add_argument("--scene", choices=sorted(SCENES), default="box_room")
    s.add_argument("--script", choices=["stationary", "yaw_sweep", "full_turn"], default="full_turn")
    s.add_argument("--duration", type=float, default=35.0, help="seconds")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--yaw-rate", type=float, default=11.459, help="deg/s, yaw_sweep only")
    s.add_argument("--gyro-noise", type=float, help="deg/s per sample (overrides sim.gyro_noise_std)")
    s.add_argument("--gyro-bias", type=float, nargs=3, metavar=("BX", "BY", "BZ"), help="deg/s")
    s.add_argument("--corrupt-scan", type=int, help="shuffle the depths of this scan index")
    s.add_argument("--config", help="config file; its sim.* keys apply")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="process a run with the fusion loop or a baseline")
    r.add_argument("--input", required=True)
    r.add_argument("--mode", choices=MODES, default="fused")
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="print metrics of a report directory")
    e.add_argument("--report", required=True)
    e.add_argument("--baseline")
    e.add_argument("--out", help="error series CSV (default <report>/errors.csv)")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gain-study", help="iterate the discrete Riccati recursion")
    g.add_argument("--m", required=True, help="6x6 CSV, motion noise per second")
    g.add_argument("--n", required=True, help="6x6 CSV, observation noise density")
    g.add_argument("--dt", type=float, required=True)
    g.add_argument("--steps", type=int, required=True)
    g.add_argument("--p0", type=float, default=1e-4)
    g.add_argument("--every", type=int, default=1, help="write every k-th step")
    g.add_argument("--discrete-n", action="store_true", help="use N as the per-observation covariance")
    g.add_argument("--out", help="CSV path (default stdout)")
    g.set_defaults(func=cmd_gain_study)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
