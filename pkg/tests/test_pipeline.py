import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from depthfusion import cli, iekf
from depthfusion.config import Config, dump_config, load_config, parse_config
from depthfusion.liegroup import Pose, exp_rotation
from depthfusion.pipeline import (
    GlobalMap,
    RunReport,
    ScanRecord,
    evaluate,
    export_map,
    read_report,
    run_fusion,
    run_gyro_only,
    run_icp_only,
    run_pipeline,
    wall_discrepancy,
    write_report,
)
from depthfusion.pointcloud import read_ply
from depthfusion.simulator import SimConfig, TrajectoryScript, box_room, corridor, corrupt_scan, make_run

CLEAN = replace(SimConfig(), depth_sigma=0.0, gyro_noise_std=0.0)
TINY = replace(SimConfig(), width=16, height=12)


@pytest.fixture(scope="module")
def yaw_run():
    return make_run(box_room(0), TrajectoryScript("yaw_sweep", 6.0, 0.2), SimConfig(), 0)


@pytest.fixture(scope="module")
def yaw_report(yaw_run):
    return run_fusion(yaw_run)


# --- loops ------------------------------------------------------------------------------


def test_noiseless_stationary_run_is_exact():
    run = make_run(box_room(0), TrajectoryScript("stationary", 3.0), CLEAN, 0)
    fused, icp = run_fusion(run), run_icp_only(run)
    for rep in (fused, icp):
        m = evaluate(rep)
        assert m.final_rotation_error_deg < np.degrees(1e-6) and m.final_translation_error_m < 1e-6
        assert len(rep.records) == len(run.scans)
    for a, b in zip(fused.estimates(), icp.estimates()):
        assert np.abs(a.matrix() - b.matrix()).max() < 1e-6


def test_icp_only_takes_the_registration(yaw_report, yaw_run):
    rep = run_icp_only(yaw_run)
    for rec in rep.records[1:]:
        assert rec.y is not None and np.array_equal(rec.estimate.matrix(), rec.y.matrix())


def test_gyro_only_bias_drift():
    sim = replace(TINY, gyro_noise_std=0.0, gyro_bias=(0.0, 0.0, 0.0087))
    run = make_run(box_room(0), TrajectoryScript("stationary", 35.0), sim, 0)
    rep = run_gyro_only(run)
    m = evaluate(rep)
    assert abs(m.final_yaw_error_deg - 17.5) < 0.5
    assert all(np.array_equal(r.estimate.translation, np.zeros(3)) for r in rep.records)


def test_gyro_only_is_exact_without_noise():
    run = make_run(box_room(0), TrajectoryScript("yaw_sweep", 5.0, 0.2), replace(TINY, gyro_noise_std=0.0), 0)
    assert evaluate(run_gyro_only(run)).final_rotation_error_deg < 1e-9


def test_gyro_only_random_walk():
    sim = replace(TINY, gyro_noise_std=0.02)
    dt = 1.0 / sim.gyro_rate
    errs = []
    for seed in range(40):
        run = make_run(box_room(0), TrajectoryScript("stationary", 8.0), sim, seed)
        errs.append(evaluate(run_gyro_only(run)).angle_error_deg)
    errs = np.radians(np.array(errs))  # (seeds, scans, 3)
    t = np.arange(errs.shape[1]) / sim.scan_rate
    for k in (4, 8, 15):
        expected = sim.gyro_noise_std * math.sqrt(dt * t[k])
        measured = errs[:, k, :].std()
        assert expected / 2 <= measured <= expected * 2


def test_corridor_flags_roll_about_its_axis():
    ratios = {}
    for scene in (corridor(0), box_room(0)):
        run = make_run(scene, TrajectoryScript("stationary", 1.0), SimConfig(), 0)
        n = run_icp_only(run).records[1].n
        lam, v = np.linalg.eigh(n[:3, :3])
        ratios[scene.name] = (lam[-1] / lam[-2], abs(v[0, -1]))
    ratio, along = ratios["corridor"]
    assert along > 0.98 and ratio >= 2.0
    assert ratio > ratios["box_room"][0]


def test_corrupted_scan_is_rejected(yaw_run, yaw_report):
    bad = run_fusion(corrupt_scan(yaw_run, 6))
    rec = bad.records[6]
    assert not rec.valid
    assert "mahalanobis gate" in rec.reason or "residual gate" in rec.reason
    assert np.array_equal(rec.estimate.matrix(), rec.prediction.matrix())
    for a, b in zip(yaw_report.records[:6], bad.records[:6]):
        assert np.array_equal(a.estimate.matrix(), b.estimate.matrix())
    assert sum(not r.valid for r in bad.records[1:]) == 1


def test_rejected_scan_only_inflates_covariance(yaw_run):
    bad = run_fusion(corrupt_scan(yaw_run, 6))
    rows = [r for r in bad.log_rows if r["obs_valid"] != ""]
    before, after = rows[5], rows[6]
    m = Config().iekf.motion_noise()
    assert after["trace_P_rot"] == pytest.approx(before["trace_P_rot"] + 0.5 * np.trace(m[:3, :3]), rel=1e-9)


def test_two_rate_ordering(yaw_run, yaw_report):
    rows = yaw_report.log_rows
    scan_rows = [i for i, r in enumerate(rows) if r["obs_valid"] != ""]
    assert len(scan_rows) == len(yaw_run.scans)
    for i, t in zip(scan_rows, yaw_run.scan_t):
        gyro_times = [r["time_s"] for r in rows[:i] if r["obs_valid"] == ""]
        assert sum(g <= t + 1e-9 for g in yaw_run.gyro_t) == len(gyro_times)
        assert all(g <= t + 1e-9 for g in gyro_times)
    assert np.all(np.diff([r["time_s"] for r in rows]) >= 0)


def test_map_grows_by_valid_pixels(yaw_run, monkeypatch):
    sizes = []
    original = GlobalMap.insert

    def spy(self, points, *args, **kwargs):
        before = len(self)
        original(self, points, *args, **kwargs)
        sizes.append(len(self) - before)

    monkeypatch.setattr(GlobalMap, "insert", spy)
    rep = run_fusion(yaw_run)
    assert sizes == [int(np.isfinite(img.depth).sum()) for img in yaw_run.scans]
    assert len(rep.map) == sum(sizes)


def test_out_of_order_gyro_is_an_error(yaw_run):
    shuffled = replace(yaw_run, gyro_t=yaw_run.gyro_t[::-1].copy())
    with pytest.raises(iekf.OutOfOrderError):
        run_fusion(shuffled)


def test_empty_first_scan_is_an_error(yaw_run):
    blank = yaw_run.scans[0].__class__(np.full_like(yaw_run.scans[0].depth, np.nan), yaw_run.intrinsics)
    with pytest.raises(ValueError):
        run_fusion(replace(yaw_run, scans=[blank] + yaw_run.scans[1:]))


def test_unknown_mode(yaw_run):
    with pytest.raises(ValueError):
        run_pipeline(yaw_run, mode="magic")


def test_fusion_is_deterministic(yaw_run, yaw_report):
    again = run_fusion(yaw_run)
    for a, b in zip(yaw_report.records, again.records):
        assert np.array_equal(a.estimate.matrix(), b.estimate.matrix())


# --- metrics ----------------------------------------------------------------------------


def _report(estimates, truths):
    rep = RunReport("fused")
    for i, (e, g) in enumerate(zip(estimates, truths)):
        rep.records.append(ScanRecord(0.5 * i, e, g, e, valid=True))
    return rep


def test_metrics_of_truth_are_zero():
    truths = [Pose(exp_rotation([0, 0, 0.1 * i]), [0.1 * i, 0, 0]) for i in range(10)]
    s = evaluate(_report(truths, truths)).summary()
    assert all(v == 0 for v in s.values())


def test_constant_yaw_offset():
    truths = [Pose(exp_rotation([0, 0, 0.3 * i]), np.zeros(3)) for i in range(10)]
    off = exp_rotation([0, 0, np.radians(2.0)])
    est = [Pose(off @ g.rotation, g.translation) for g in truths]
    m = evaluate(_report(est, truths))
    assert m.angle_std_deg < 1e-9
    assert m.angle_mean_deg == pytest.approx(2.0, abs=1e-9)
    assert m.final_yaw_error_deg == pytest.approx(2.0, abs=1e-9)
    assert m.loop_rotation_error_deg < 1e-9


def _quat_mul(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def test_metrics_match_csv_reimplementation(yaw_report, tmp_path):
    write_report(yaw_report, tmp_path)
    with open(tmp_path / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    vecs, trans = [], []
    for r in rows:
        qe = np.array([float(r[f"est_q{c}"]) for c in "wxyz"])
        qt = np.array([float(r[f"true_q{c}"]) for c in "wxyz"])
        qd = _quat_mul(qe, qt * [1, -1, -1, -1])
        if qd[0] < 0:
            qd = -qd
        s = np.linalg.norm(qd[1:])
        vecs.append(np.zeros(3) if s == 0 else 2 * math.atan2(s, qd[0]) * qd[1:] / s)
        trans.append(math.dist([float(r[f"est_t{c}"]) for c in "xyz"], [float(r[f"true_t{c}"]) for c in "xyz"]))
    vecs = np.degrees(np.array(vecs))
    m = evaluate(yaw_report)
    assert m.angle_std_deg == pytest.approx(float(np.mean(vecs.std(axis=0))), abs=1e-9)
    assert m.angle_mean_deg == pytest.approx(float(np.linalg.norm(vecs, axis=1).mean()), abs=1e-9)
    assert m.final_translation_error_m == pytest.approx(trans[-1], abs=1e-12)
    assert m.rejected == sum(r["valid"] == "0" for r in rows[1:])


def test_fused_beats_icp_on_a_noisy_sweep(yaw_run, yaw_report):
    fused = evaluate(yaw_report)
    icp = evaluate(run_icp_only(yaw_run))
    assert fused.angle_std_deg < icp.angle_std_deg


def test_icp_only_full_turn_reports_loop_error():
    run = make_run(box_room(0), TrajectoryScript("full_turn", 35.0), SimConfig(width=80, height=60), 0)
    m = evaluate(run_icp_only(run))
    assert np.isfinite(m.loop_rotation_error_deg) and m.loop_rotation_error_deg > 0
    assert m.loop_translation_error_m > 0


def test_wall_discrepancy_of_perfect_report(yaw_report):
    rep = replace(yaw_report, records=[replace(r, estimate=r.truth) for r in yaw_report.records])
    assert wall_discrepancy(rep) == 0.0
    assert wall_discrepancy(yaw_report) > 0


# --- export and files ------------------------------------------------------------------


def test_export_empty_map(tmp_path):
    export_map(GlobalMap(), tmp_path / "m.ply")
    assert read_ply(tmp_path / "m.ply").shape == (0, 3)


def test_export_three_points(tmp_path):
    gm = GlobalMap(0.1)
    pts = np.array([[0.1, 0.2, 0.3], [1.0, -2.0, 3.5], [1e-7, 4.0, -0.25]])
    gm.insert(pts)
    export_map(gm, tmp_path / "m.ply")
    assert np.array_equal(read_ply(tmp_path / "m.ply"), pts)


def test_matching_copy_averages_voxels():
    gm = GlobalMap(1.0)
    gm.insert(np.array([[0.1, 0.1, 0.1], [0.3, 0.3, 0.3]]))
    gm.insert(np.array([[0.5, 0.5, 0.5], [2.5, 0.5, 0.5]]))
    got = gm.matching_points[np.argsort(gm.matching_points[:, 0])]
    assert np.allclose(got, [[0.3, 0.3, 0.3], [2.5, 0.5, 0.5]])
    gm.insert(np.array([[9.0, 9.0, 9.0]]), matching=False)
    assert len(gm) == 5 and len(gm.matching_points) == 2


def test_report_round_trip(yaw_report, tmp_path):
    write_report(yaw_report, tmp_path)
    back = read_report(tmp_path)
    assert back.mode == "fused" and len(back.records) == len(yaw_report.records)
    for a, b in zip(yaw_report.records, back.records):
        assert np.abs(a.estimate.matrix() - b.estimate.matrix()).max() < 1e-12
        assert a.valid == b.valid and a.reason == b.reason
    assert evaluate(back).angle_std_deg == pytest.approx(evaluate(yaw_report).angle_std_deg, abs=1e-9)
    for name in ("filter_log.csv", "matrices.csv", "map.ply"):
        assert (tmp_path / name).exists()


# --- config and CLI ---------------------------------------------------------------------


def test_config_parse_and_dump(tmp_path):
    cfg = parse_config("# comment\nicp.max_iterations = 7\niekf.sigma_sensor=0.1\nsim.gyro_noise_std = 0.01\n")
    assert cfg.icp.max_iterations == 7 and cfg.iekf.sigma_sensor == 0.1 and cfg.sim.gyro_noise_std == 0.01
    (tmp_path / "c.txt").write_text(dump_config(cfg))
    assert dump_config(load_config(tmp_path / "c.txt")) == dump_config(cfg)
    with pytest.raises(KeyError):
        parse_config("icp.nonsense = 1")
    with pytest.raises(ValueError):
        parse_config("iekf.quaternion_step = sideways").iekf.exact_quaternion


def test_cli_round_trip(tmp_path, capsys):
    run_dir, out_dir = tmp_path / "run", tmp_path / "out"
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("sim.width = 40\nsim.height = 30\n")
    assert cli.main(["simulate", "--scene", "box_room", "--script", "yaw_sweep", "--duration", "2",
                     "--seed", "1", "--out", str(run_dir), "--config", str(cfg)]) == 0
    assert cli.main(["run", "--input", str(run_dir), "--mode", "fused", "--out", str(out_dir)]) == 0
    assert cli.main(["run", "--input", str(run_dir), "--mode", "icp", "--out", str(tmp_path / "icp")]) == 0
    assert cli.main(["eval", "--report", str(out_dir), "--baseline", str(tmp_path / "icp")]) == 0
    text = capsys.readouterr().out
    assert "angle_std_deg" in text and "wall_discrepancy_m" in text
    assert (out_dir / "errors.csv").exists()


def test_cli_gain_study(tmp_path, capsys):
    from depthfusion.covariance import write_covariance_csv

    write_covariance_csv(tmp_path / "m.csv", np.eye(6) * 2.0)
    write_covariance_csv(tmp_path / "n.csv", np.eye(6) * 0.5)
    assert cli.main(["gain-study", "--m", str(tmp_path / "m.csv"), "--n", str(tmp_path / "n.csv"),
                     "--dt", "0.002", "--steps", "5000", "--every", "100", "--out", str(tmp_path / "k.csv")]) == 0
    with open(tmp_path / "k.csv") as fh:
        last = list(csv.DictReader(fh))[-1]
    assert float(last["rel_err"]) < 0.01


def test_cli_reports_bad_input(tmp_path):
    assert cli.main(["run", "--input", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
