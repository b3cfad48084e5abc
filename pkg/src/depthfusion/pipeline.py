"""Two-rate fusion loop, the ICP-only and gyro-only baselines, and run metrics.

Between scans the gyro is integrated open loop. At each scan the depth
image is pre-aligned on depth-jump features, registered against the
accumulated map with ICP, turned into a ground-frame pose observation with
its Fisher covariance, gated, fused, and finally added to the map at the
fused pose.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import iekf
from .config import Config
from .covariance import UnobservableRegistrationError, analyze_observability, fisher_matrix, icp_covariance
from .icp import DegenerateConfigurationError, InsufficientOverlapError, coarse_align, icp_register
from .liegroup import Pose, UnitQuaternion, rotation_angle, rotation_vector
from .pointcloud import (
    SpatialIndex,
    depth_to_cloud,
    extract_depth_gradient_points,
    in_any_view,
    pack_voxel_keys,
    smooth_depth,
    voxel_downsample,
    write_ply,
)
from .simulator import SensorRun

log = logging.getLogger(__name__)

FUSED, ICP_ONLY, GYRO_ONLY = "fused", "icp", "gyro"
MODES = (FUSED, ICP_ONLY, GYRO_ONLY)
_EPS = 1e-9


class GlobalMap:
    """Accumulated ground-frame points plus a voxel-averaged copy used for matching.

    The raw points are kept for export. The matching copy (one centroid per
    occupied voxel) is refreshed after every insertion; ``voxel <= 0`` keeps
    every raw point.
    """

    def __init__(self, voxel: float = 0.05):
        self.voxel = voxel
        self._chunks: list[np.ndarray] = []
        self._matching_chunks: list[np.ndarray] = []
        self._features: list[np.ndarray] = []
        self._keys = np.zeros(0, dtype=np.int64)
        self._sums = np.zeros((0, 3))
        self._counts = np.zeros(0)
        self._index: Optional[SpatialIndex] = None
        self._feature_cache: Optional[np.ndarray] = None
        self.views: list[Pose] = []  # ground-frame camera poses behind the matching copy

    def __len__(self) -> int:
        return sum(len(c) for c in self._chunks)

    @property
    def points(self) -> np.ndarray:
        return np.concatenate(self._chunks) if self._chunks else np.zeros((0, 3))

    def insert(
        self,
        points: np.ndarray,
        features: Optional[np.ndarray] = None,
        camera: Optional[Pose] = None,
        matching: bool = True,
    ) -> None:
        """Add ground-frame points to the raw map and, if ``matching``, to the matching copy."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        self._chunks.append(points)
        if not matching:
            return
        if camera is not None:
            self.views.append(camera)
        if features is not None and len(features):
            self._features.append(np.asarray(features, dtype=float).reshape(-1, 3))
            self._feature_cache = None
        if self.voxel > 0 and len(points):
            keys = pack_voxel_keys(points, self.voxel)
            if keys is None:
                raise ValueError("map points exceed the voxel key range")
            allk = np.concatenate([self._keys, keys])
            uniq, inv = np.unique(allk, return_inverse=True)
            inv = inv.reshape(-1)
            old = len(self._keys)
            counts = np.bincount(inv, minlength=len(uniq)).astype(float)
            counts[inv[:old]] += self._counts - 1.0
            sums = np.column_stack(
                [np.bincount(inv[old:], weights=points[:, a], minlength=len(uniq)) for a in range(3)]
            )
            sums[inv[:old]] += self._sums
            self._keys, self._sums, self._counts = uniq, sums, counts
        elif len(points):
            self._matching_chunks.append(points)
        self._index = None

    def clear_matching(self) -> None:
        """Drop the matching copy and features (raw points are kept for export)."""
        self._keys = np.zeros(0, dtype=np.int64)
        self._sums = np.zeros((0, 3))
        self._counts = np.zeros(0)
        self._features = []
        self._feature_cache = None
        self._matching_chunks = []
        self.views = []
        self._index = None

    @property
    def matching_points(self) -> np.ndarray:
        if self.voxel > 0:
            return self._sums / self._counts[:, None]
        return np.concatenate(self._matching_chunks) if self._matching_chunks else np.zeros((0, 3))

    @property
    def index(self) -> SpatialIndex:
        if self._index is None:
            self._index = SpatialIndex(self.matching_points)
        return self._index

    @property
    def features(self) -> np.ndarray:
        if self._feature_cache is None:
            self._feature_cache = np.concatenate(self._features) if self._features else np.zeros((0, 3))
        return self._feature_cache


@dataclass
class ScanRecord:
    t: float
    estimate: Pose
    truth: Pose
    prediction: Pose
    y: Optional[Pose] = None
    innovation: Optional[np.ndarray] = None
    gain: Optional[np.ndarray] = None
    n: Optional[np.ndarray] = None
    valid: bool = False
    reason: str = ""
    icp_iterations: int = 0
    icp_residual: float = float("nan")
    correspondences: int = 0
    condition_number: float = float("nan")
    weak_directions: int = 0


@dataclass
class RunReport:
    mode: str
    records: list = field(default_factory=list)
    log_rows: list = field(default_factory=list)
    map: Optional[GlobalMap] = None
    last_cloud: Optional[np.ndarray] = None  # body-frame points of the final scan

    @property
    def times(self) -> np.ndarray:
        return np.array([r.t for r in self.records])

    def estimates(self) -> list[Pose]:
        return [r.estimate for r in self.records]

    def truths(self) -> list[Pose]:
        return [r.truth for r in self.records]


def _check_order(t: np.ndarray, what: str) -> None:
    if np.any(np.diff(t) <= 0):
        raise iekf.OutOfOrderError(f"{what} timestamps must be strictly increasing")


def _observe(state, img, body_cloud, gmap, config: Config, init: Pose, run: SensorRun):
    """Register one scan and build the observation; returns (obs, icp_result, report)."""
    icp_cfg = config.icp
    params = icp_cfg.params()
    if icp_cfg.coarse_iterations > 0:
        init = coarse_align(
            img, gmap.features, init, params, icp_cfg.jump_threshold,
            icp_cfg.coarse_iterations, run.extrinsic, icp_cfg.vertical_gradients,
        )
    source = voxel_downsample(body_cloud, icp_cfg.source_voxel)
    if config.map.overlap_margin >= 0 and gmap.views:
        # keep only points the map can support: beyond its frontier they drag the scan back
        seen = in_any_view(init.apply(source), gmap.views, img.intrinsics, img.width, img.height,
                           config.map.overlap_margin)
        source = source[seen]
    try:
        res = icp_register(source, None, init, params, target_index=gmap.index)
    except (InsufficientOverlapError, DegenerateConfigurationError) as exc:
        log.info("scan rejected: %s", exc)
        return iekf.Observation(init, None, False, "insufficient overlap"), None, None
    sigma = config.iekf.sigma_sensor
    q = res.target_points if config.cov.points == "matched" else gmap.matching_points
    report = analyze_observability(fisher_matrix(q, sigma, config.cov.recenter))
    try:
        n = icp_covariance(q, sigma, config.cov.recenter, config.iekf.condition_limit)
    except UnobservableRegistrationError:
        return iekf.Observation(res.transform, None, False, "ill-conditioned"), res, report
    nu = iekf.innovation(state.pose, res.transform, config.iekf.frame)
    valid, reason = iekf.reject_observation(
        res, report, config.iekf.gates(), sigma, nu, state.p, n
    )
    return iekf.Observation(res.transform, n, valid, reason), res, report


def run_pipeline(run: SensorRun, config: Optional[Config] = None, mode: str = FUSED) -> RunReport:
    """Process a sensor run in timestamp order in one of :data:`MODES`."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    config = config or Config()
    _check_order(np.asarray(run.gyro_t), "gyro")
    _check_order(np.asarray(run.scan_t), "scan")
    if not run.scans:
        raise ValueError("run has no scans")
    first = depth_to_cloud(run.scans[0])
    if len(first) == 0:
        raise ValueError("first scan is empty")

    m = config.iekf.motion_noise()
    quat = config.iekf.quaternion
    exact = config.iekf.exact_quaternion
    frame = config.iekf.frame
    t0 = float(run.scan_t[0])
    state = iekf.initial_state(run.truth_at(t0), config.iekf.p0, t0)
    gmap = GlobalMap(config.map.voxel)
    report = RunReport(mode, map=gmap)
    predict_pose = mode == FUSED or mode == GYRO_ONLY or config.baseline.icp_gyro_init
    gi = 0
    steps = 0
    last_body = None

    for j, (t, img) in enumerate(zip(run.scan_t, run.scans)):
        t = float(t)
        img = smooth_depth(img, config.icp.depth_smoothing, config.icp.smoothing_edge)
        while gi < len(run.gyro_t) and run.gyro_t[gi] <= t + _EPS:
            dt = float(run.gyro_t[gi]) - state.time
            if dt <= 0:
                raise iekf.OutOfOrderError(f"gyro sample at {run.gyro_t[gi]} precedes filter time {state.time}")
            if predict_pose:
                state = iekf.predict(state, run.gyro_w[gi], dt, quat, exact)
                steps += 1
                if config.iekf.renormalize_every and steps % config.iekf.renormalize_every == 0:
                    state = iekf.renormalize(state)
            else:
                state = replace(state, time=state.time + dt)
            report.log_rows.append(iekf.log_row(state))
            gi += 1
        if t < state.time - _EPS:
            raise iekf.OutOfOrderError(f"scan at {t} precedes filter time {state.time}")
        state = replace(state, time=t)
        prediction = state.pose

        cam_cloud = depth_to_cloud(img)
        body = run.extrinsic.apply(cam_cloud.points)
        last_body = body
        feats = run.extrinsic.apply(extract_depth_gradient_points(
            img, config.icp.jump_threshold, config.icp.vertical_gradients).points)
        rec = ScanRecord(t, state.pose, run.truth_at(t), prediction)

        if j == 0:
            gmap.insert(state.pose.apply(body), state.pose.apply(feats), state.pose @ run.extrinsic)
            rec.valid, rec.reason = True, "bootstrap"
            report.records.append(rec)
            report.log_rows.append(iekf.log_row(state, True, "bootstrap"))
            continue

        dt_update = t - state.last_update_time
        matching = True
        if mode == GYRO_ONLY:
            state = replace(state, last_update_time=t)
            rec.valid, rec.reason = False, "gyro only"
        else:
            obs, res, obs_report = _observe(state, img, body, gmap, config, state.pose, run)
            if res is not None:
                rec.y = res.transform
                rec.icp_iterations = res.iterations_used
                rec.icp_residual = res.final_mean_residual
                rec.correspondences = res.correspondences_used
                rec.innovation = iekf.innovation(state.pose, res.transform, frame)
            if obs_report is not None:
                rec.condition_number = obs_report.condition_number
                rec.weak_directions = int(obs_report.weak.sum())
            rec.n = obs.n
            if mode == ICP_ONLY:
                if res is not None:
                    k = None
                    if obs.n is not None:
                        k, p_next = iekf.discrete_gain(state.p, obs.n, m, dt_update)
                    else:
                        p_next = state.p + m * dt_update
                    state = replace(state, pose=res.transform, p=p_next, last_update_time=t)
                    rec.gain, rec.valid = k, True
                else:
                    state = iekf.update(state, obs, m, dt_update, frame, quat, exact)
                    rec.valid, rec.reason = False, obs.reason
            else:
                state, details = iekf.update_step(state, obs, m, dt_update, frame, quat, exact)
                rec.valid, rec.reason = obs.valid, obs.reason
                if details is not None:
                    rec.gain = details.gain
                # a registration that failed its own gates may be garbage: keep it out of matching
                matching = obs.valid or config.map.insert_rejected or set(obs.reason.split(", ")) <= {
                    "insufficient overlap", "ill-conditioned"}
        rec.estimate = state.pose
        report.records.append(rec)
        report.log_rows.append(iekf.log_row(state, rec.valid, rec.reason))
        if matching and config.map.mode == "scan":
            gmap.clear_matching()
        gmap.insert(state.pose.apply(body), state.pose.apply(feats), state.pose @ run.extrinsic, matching)

    report.last_cloud = last_body
    return report


def run_fusion(run: SensorRun, config: Optional[Config] = None) -> RunReport:
    return run_pipeline(run, config, FUSED)


def run_icp_only(run: SensorRun, config: Optional[Config] = None) -> RunReport:
    return run_pipeline(run, config, ICP_ONLY)


def run_gyro_only(run: SensorRun, config: Optional[Config] = None) -> RunReport:
    return run_pipeline(run, config, GYRO_ONLY)


# --- metrics --------------------------------------------------------------------


@dataclass
class Metrics:
    angle_error_deg: np.ndarray  # (n, 3) ground-frame rotation-error vector per scan
    total_angle_error_deg: np.ndarray
    translation_error_m: np.ndarray
    angle_std_deg: float  # mean of the per-axis standard deviations
    angle_mean_deg: float
    final_rotation_error_deg: float
    final_yaw_error_deg: float
    final_translation_error_m: float
    loop_rotation_error_deg: float
    loop_translation_error_m: float
    rejected: int

    def summary(self) -> dict:
        return {
            "angle_std_deg": self.angle_std_deg,
            "angle_mean_deg": self.angle_mean_deg,
            "final_rotation_error_deg": self.final_rotation_error_deg,
            "final_yaw_error_deg": self.final_yaw_error_deg,
            "final_translation_error_m": self.final_translation_error_m,
            "loop_rotation_error_deg": self.loop_rotation_error_deg,
            "loop_translation_error_m": self.loop_translation_error_m,
            "max_total_angle_error_deg": float(self.total_angle_error_deg.max(initial=0.0)),
            "rejected": self.rejected,
        }


def pose_errors(estimates: list[Pose], truths: list[Pose]):
    """Per-pose rotation-error vectors (deg) of ``R_hat R_true^T`` and translation error norms (m)."""
    rot = np.array([np.degrees(rotation_vector(e.rotation @ g.rotation.T)) for e, g in zip(estimates, truths)])
    trans = np.array([np.linalg.norm(e.translation - g.translation) for e, g in zip(estimates, truths)])
    return rot.reshape(-1, 3), trans


def evaluate(report: RunReport) -> Metrics:
    est, truth = report.estimates(), report.truths()
    if not est:
        raise ValueError("report has no records")
    rot, trans = pose_errors(est, truth)
    total = np.linalg.norm(rot, axis=1)
    rel_est = est[0].inverse() @ est[-1]
    rel_true = truth[0].inverse() @ truth[-1]
    loop = rel_est.inverse() @ rel_true
    return Metrics(
        angle_error_deg=rot,
        total_angle_error_deg=total,
        translation_error_m=trans,
        angle_std_deg=float(rot.std(axis=0).mean()),
        angle_mean_deg=float(total.mean()),
        final_rotation_error_deg=float(total[-1]),
        final_yaw_error_deg=float(abs(rot[-1, 2])),
        final_translation_error_m=float(trans[-1]),
        loop_rotation_error_deg=float(np.degrees(rotation_angle(loop.rotation))),
        loop_translation_error_m=float(np.linalg.norm(loop.translation)),
        rejected=sum(1 for r in report.records[1:] if not r.valid),
    )


def wall_discrepancy(report: RunReport) -> float:
    """Median displacement (m) of the final scan's points between estimated and true placement.

    The first scan is placed at its true pose, so this is how far the last
    scan's surfaces land from where the first scan put the same surfaces.
    """
    if report.last_cloud is None or not report.records:
        raise ValueError("report carries no final scan")
    last = report.records[-1]
    d = last.estimate.apply(report.last_cloud) - last.truth.apply(report.last_cloud)
    return float(np.median(np.linalg.norm(d, axis=1)))


# --- export ---------------------------------------------------------------------


def export_map(gmap: GlobalMap, path) -> None:
    write_ply(path, gmap.points)


REPORT_COLUMNS = (
    ["t"]
    + [f"est_{c}" for c in ("tx", "ty", "tz", "qw", "qx", "qy", "qz")]
    + [f"true_{c}" for c in ("tx", "ty", "tz", "qw", "qx", "qy", "qz")]
    + [f"icp_{c}" for c in ("tx", "ty", "tz", "qw", "qx", "qy", "qz")]
    + [f"nu_{i}" for i in range(6)]
    + ["valid", "reason", "icp_iterations", "icp_residual", "correspondences", "condition_number", "weak_directions"]
)


def _pose_cells(p: Optional[Pose]) -> list:
    if p is None:
        return [""] * 7
    q = UnitQuaternion.from_matrix(p.rotation)
    return [*map(float, p.translation), q.w, q.x, q.y, q.z]


def write_report(report: RunReport, out_dir) -> Path:
    """Write ``report.csv``, ``matrices.csv`` (K and N row-major), ``filter_log.csv`` and ``map.ply``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fmt = lambda v: f"{v:.17g}" if isinstance(v, float) else v  # noqa: E731
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in report.records:
            nu = [""] * 6 if r.innovation is None else list(map(float, r.innovation))
            row = [r.t, *_pose_cells(r.estimate), *_pose_cells(r.truth), *_pose_cells(r.y), *nu,
                   int(r.valid), r.reason, r.icp_iterations, float(r.icp_residual), r.correspondences,
                   float(r.condition_number), r.weak_directions]
            w.writerow([fmt(v) for v in row])
    with open(out / "matrices.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"k{i}{j}" for i in range(6) for j in range(6)]
                   + [f"n{i}{j}" for i in range(6) for j in range(6)])
        for r in report.records:
            k = [""] * 36 if r.gain is None else [fmt(float(v)) for v in np.ravel(r.gain)]
            n = [""] * 36 if r.n is None else [fmt(float(v)) for v in np.ravel(r.n)]
            w.writerow([fmt(r.t)] + k + n)
    iekf.write_filter_log(out / "filter_log.csv", report.log_rows)
    (out / "mode.txt").write_text(report.mode + "\n")
    if report.map is not None:
        export_map(report.map, out / "map.ply")
    if report.last_cloud is not None:
        np.savetxt(out / "last_cloud.csv", report.last_cloud, delimiter=",", fmt="%.17g")
    return out


def _pose_from_cells(cells) -> Optional[Pose]:
    if cells[0] == "":
        return None
    tx, ty, tz, qw, qx, qy, qz = map(float, cells)
    return Pose(UnitQuaternion.from_array([qw, qx, qy, qz]).to_matrix(), [tx, ty, tz])


def read_report(in_dir) -> RunReport:
    src = Path(in_dir)
    mode = (src / "mode.txt").read_text().strip() if (src / "mode.txt").exists() else FUSED
    report = RunReport(mode)
    with open(src / "report.csv", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    for row in rows:
        nu = None if row[22] == "" else np.array(list(map(float, row[22:28])))
        est, truth = _pose_from_cells(row[1:8]), _pose_from_cells(row[8:15])
        rec = ScanRecord(float(row[0]), est, truth, est, _pose_from_cells(row[15:22]), nu,
                         valid=bool(int(row[28])), reason=row[29], icp_iterations=int(row[30]),
                         icp_residual=float(row[31]), correspondences=int(row[32]),
                         condition_number=float(row[33]), weak_directions=int(row[34]))
        report.records.append(rec)
    if (src / "last_cloud.csv").exists():
        report.last_cloud = np.loadtxt(src / "last_cloud.csv", delimiter=",", ndmin=2)
    return report
