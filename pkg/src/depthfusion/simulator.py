"""Deterministic stand-in for a depth camera rigidly mounted on a gyro.

Frames: the ground frame has z up and coincides with the body frame at the
start of every scripted trajectory. The body frame is x forward, y left,
z up; the camera looks along body x with image x to the right and image y
down, pitched 20 degrees towards the floor (``CAMERA_IN_BODY``).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .liegroup import Pose, UnitQuaternion, exp_rotation
from .pointcloud import DepthImage, Intrinsics, read_depth, write_depth

CAMERA_PITCH = np.radians(20.0)
# level camera (z forward, x right, y down) tilted down about body y so the floor stays in view
CAMERA_IN_BODY = Pose(
    exp_rotation([0.0, CAMERA_PITCH, 0.0]) @ np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]),
    np.zeros(3),
)
_TIME_EPS = 1e-9


# --- scene ----------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Solid axis-aligned box, visible from outside."""

    lo: tuple
    hi: tuple

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (lo - origin) * inv
            t2 = (hi - origin) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tmax >= tmin) & (tmin > 0)
        return np.where(hit, tmin, np.inf)


@dataclass(frozen=True)
class Rect:
    """Finite plane: centre, unit normal, in-plane axes ``u``/``v`` with half extents."""

    center: tuple
    normal: tuple
    u: tuple
    half_u: float
    half_v: float

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        n = np.asarray(self.normal, dtype=float)
        u = np.asarray(self.u, dtype=float)
        v = np.cross(n, u)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - origin) @ n) / denom
        hitp = origin + t[:, None] * dirs - c
        ok = (
            (np.abs(denom) > 1e-12)
            & (t > 0)
            & (np.abs(hitp @ u) <= self.half_u)
            & (np.abs(hitp @ v) <= self.half_v)
        )
        return np.where(ok, t, np.inf)


def _rect_xyz(axis: int, value: float, lo: Sequence[float], hi: Sequence[float]) -> Rect:
    """Axis-aligned rectangle at ``coord[axis] == value`` spanning ``lo..hi`` in the other axes."""
    others = [a for a in range(3) if a != axis]
    center = [0.0, 0.0, 0.0]
    center[axis] = value
    for a in others:
        center[a] = 0.5 * (lo[a] + hi[a])
    normal = [0.0, 0.0, 0.0]
    normal[axis] = 1.0
    u = [0.0, 0.0, 0.0]
    u[others[0]] = 1.0
    half_u = 0.5 * (hi[others[0]] - lo[others[0]])
    half_v = 0.5 * (hi[others[1]] - lo[others[1]])
    # v = n x u must span the second axis; its sign is irrelevant for |.| tests
    return Rect(tuple(center), tuple(normal), tuple(u), half_u, half_v)


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    seed: int = 0
    name: str = "custom"

    def __post_init__(self):
        if len(self.primitives) == 0:
            raise ValueError("a scene needs at least one primitive")

    def cast(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the nearest hit for each direction (inf when none)."""
        best = np.full(len(dirs), np.inf)
        for prim in self.primitives:
            np.minimum(best, prim.intersect(origin, dirs), out=best)
        return best


def room_walls(lo: Sequence[float], hi: Sequence[float]) -> list[Rect]:
    walls = []
    for axis in range(3):
        walls.append(_rect_xyz(axis, lo[axis], lo, hi))
        walls.append(_rect_xyz(axis, hi[axis], lo, hi))
    return walls


def box_room(seed: int = 0) -> Scene:
    """6 m x 5 m x 3 m room, sensor 1.2 m above the floor, two interior boxes."""
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(-0.1, 0.1, size=(2, 3))
    lo, hi = (-3.0, -2.5, -1.2), (3.0, 2.5, 1.8)
    boxes = []
    for (cx, cy, cz, sx, sy, sz), j in zip(
        [(1.6, 0.9, -0.6, 0.6, 0.8, 1.2), (-1.2, -1.5, -0.5, 0.8, 0.6, 1.4)], jitter
    ):
        c = np.array([cx, cy, cz]) + j
        h = np.array([sx, sy, sz]) / 2
        boxes.append(Box(tuple(c - h), tuple(c + h)))
    return Scene(tuple(room_walls(lo, hi) + boxes), seed, "box_room")


def corridor(seed: int = 0) -> Scene:
    """Long featureless corridor along ground x: translation along x is poorly observed."""
    lo, hi = (-40.0, -1.0, -1.2), (40.0, 1.0, 1.3)
    walls = [w for w in room_walls(lo, hi) if w.normal[0] == 0.0]
    return Scene(tuple(walls), seed, "corridor")


def single_wall(seed: int = 0, distance: float = 3.0, half_size: float = 20.0) -> Scene:
    """One wall facing the sensor at ``distance`` m along ground x."""
    return Scene((_rect_xyz(0, distance, (0, -half_size, -half_size), (0, half_size, half_size)),), seed, "wall")


def edge_scene(seed: int = 0) -> Scene:
    """Wall at 4 m with a box in front of its left half: one vertical depth edge."""
    wall = _rect_xyz(0, 4.0, (0, -10.0, -10.0), (0, 10.0, 10.0))
    floor = _rect_xyz(2, -1.2, (-1.0, -10.0, 0), (10.0, 10.0, 0))
    box = Box((2.0, 0.0, -1.2), (2.6, 3.0, 1.5))
    return Scene((wall, floor, box), seed, "edge")


SCENES = {"box_room": box_room, "corridor": corridor, "wall": single_wall, "edge": edge_scene}


def make_scene(name: str, seed: int = 0) -> Scene:
    try:
        return SCENES[name](seed)
    except KeyError:
        raise ValueError(f"unknown scene {name!r}; choose from {sorted(SCENES)}") from None


# --- trajectories ---------------------------------------------------------------


def _yaw_pose(yaw: float, position=(0.0, 0.0, 0.0)) -> Pose:
    return Pose(exp_rotation([0.0, 0.0, yaw]), position)


@dataclass(frozen=True)
class TrajectoryScript:
    """Scripted body motion starting at the ground-frame origin.

    ``yaw_sweep`` turns at constant ``yaw_rate`` about the vertical axis;
    ``full_turn`` completes one revolution over ``duration``;
    ``waypoint_path`` visits ``waypoints`` ``(x, y, yaw)`` at equal time steps
    with piecewise-constant velocities.
    """

    kind: str = "stationary"
    duration: float = 10.0
    yaw_rate: float = 0.0
    waypoints: tuple = ()

    def __post_init__(self):
        if self.kind not in ("stationary", "yaw_sweep", "full_turn", "waypoint_path"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if self.kind == "waypoint_path" and len(self.waypoints) < 2:
            raise ValueError("waypoint_path needs at least two waypoints")

    @property
    def rate(self) -> float:
        if self.kind == "full_turn":
            return 2.0 * np.pi / self.duration
        if self.kind == "yaw_sweep":
            return self.yaw_rate
        return 0.0

    def _segment(self, t: float):
        wp = np.asarray(self.waypoints, dtype=float)
        seg_t = self.duration / (len(wp) - 1)
        i = int(np.clip(np.floor(t / seg_t), 0, len(wp) - 2))
        return wp, seg_t, i

    def pose(self, t: float) -> Pose:
        if self.kind in ("yaw_sweep", "full_turn"):
            return _yaw_pose(self.rate * t)
        if self.kind == "waypoint_path":
            wp, seg_t, i = self._segment(t)
            a = (t - i * seg_t) / seg_t
            x, y, yaw = wp[i] + a * (wp[i + 1] - wp[i])
            x0, y0, yaw0 = wp[0]
            return _yaw_pose(-yaw0) @ _yaw_pose(yaw, (x - x0, y - y0, 0.0))
        return Pose.identity()

    def body_rate(self, t: float) -> np.ndarray:
        """Angular velocity in the body frame (rad/s)."""
        if self.kind == "waypoint_path":
            wp, seg_t, i = self._segment(t)
            return np.array([0.0, 0.0, (wp[i + 1, 2] - wp[i, 2]) / seg_t])
        return np.array([0.0, 0.0, self.rate])


# --- sensors --------------------------------------------------------------------


def pixel_rays(width: int, height: int, k: Intrinsics) -> np.ndarray:
    """Camera-frame ray directions scaled to unit z, row-major ``(h*w, 3)``."""
    v, u = np.mgrid[0:height, 0:width]
    return np.column_stack([((u - k.cx) / k.fx).ravel(), ((v - k.cy) / k.fy).ravel(), np.ones(width * height)])


def render_scan(
    scene: Scene,
    pose: Pose,
    intrinsics: Intrinsics,
    width: int,
    height: int,
    sigma: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    extrinsic: Pose = CAMERA_IN_BODY,
    max_range: float = 8.0,
) -> DepthImage:
    """Ray-cast a depth image from the body pose; Gaussian noise of std ``sigma`` on range."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    cam = pose @ extrinsic
    rays = pixel_rays(width, height, intrinsics)
    dirs = rays @ cam.rotation.T
    depth = scene.cast(cam.translation, dirs)  # unit-z rays: ray parameter is depth
    norms = np.linalg.norm(rays, axis=1)
    rng_ = depth * norms
    if sigma > 0:
        if rng is None:
            raise ValueError("a random generator is required when sigma > 0")
        rng_ = rng_ + sigma * rng.standard_normal(len(rng_))
    ok = np.isfinite(depth) & (depth * norms <= max_range) & (rng_ > 0)
    out = np.where(ok, rng_ / norms, np.nan)
    return DepthImage(out.reshape(height, width), intrinsics)


def gyro_stream(
    script: TrajectoryScript,
    rate: float,
    noise_std: float = 0.0,
    bias=(0.0, 0.0, 0.0),
    rng: Optional[np.random.Generator] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Samples ``(t_k, omega_k)`` for ``t_k = k / rate``, ``k = 1 .. duration * rate``.

    Sample ``k`` reports the body rate over ``(t_{k-1}, t_k]`` (taken at the
    interval midpoint) plus bias and white noise.
    """
    if not rate > 0:
        raise ValueError("rate must be positive")
    n = int(np.floor(script.duration * rate + _TIME_EPS))
    t = np.arange(1, n + 1) / rate
    w = np.array([script.body_rate(tk - 0.5 / rate) for tk in t]).reshape(-1, 3)
    w = w + np.asarray(bias, dtype=float)
    if noise_std > 0:
        if rng is None:
            raise ValueError("a random generator is required when noise_std > 0")
        w = w + noise_std * rng.standard_normal(w.shape)
    return t, w


@dataclass
class SimConfig:
    gyro_rate: float = 50.0
    scan_rate: float = 2.0
    gyro_noise_std: float = 0.02
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    depth_sigma: float = 0.2
    width: int = 160
    height: int = 120
    hfov_deg: float = 60.0
    max_range: float = 8.0

    def intrinsics(self) -> Intrinsics:
        return Intrinsics.from_fov(self.width, self.height, self.hfov_deg)


@dataclass
class SensorRun:
    gyro_t: np.ndarray
    gyro_w: np.ndarray
    scan_t: np.ndarray
    scans: list
    truth_t: np.ndarray
    truth: list
    intrinsics: Intrinsics
    extrinsic: Pose = CAMERA_IN_BODY
    meta: dict = field(default_factory=dict)

    def truth_at(self, t: float) -> Pose:
        i = int(np.searchsorted(self.truth_t, t - _TIME_EPS))
        if i >= len(self.truth_t) or abs(self.truth_t[i] - t) > 1e-6:
            raise KeyError(f"no ground truth at t={t}")
        return self.truth[i]


def make_run(
    scene: Scene, script: TrajectoryScript, config: SimConfig = SimConfig(), seed: int = 0
) -> SensorRun:
    if not (config.gyro_rate > 0 and config.scan_rate > 0):
        raise ValueError("rates must be positive")
    gyro_seq, scan_seq = np.random.SeedSequence(seed).spawn(2)
    gyro_t, gyro_w = gyro_stream(
        script, config.gyro_rate, config.gyro_noise_std, config.gyro_bias, np.random.default_rng(gyro_seq)
    )
    n_scans = int(np.ceil(script.duration * config.scan_rate - _TIME_EPS))
    scan_t = np.arange(n_scans) / config.scan_rate
    k = config.intrinsics()
    scan_rng = np.random.default_rng(scan_seq)
    scans = [
        render_scan(
            scene, script.pose(t), k, config.width, config.height, config.depth_sigma,
            scan_rng, CAMERA_IN_BODY, config.max_range,
        )
        for t in scan_t
    ]
    truth_t = np.unique(np.round(np.concatenate([[0.0], gyro_t, scan_t]), 9))
    truth = [script.pose(t) for t in truth_t]
    meta = {
        "seed": seed,
        "scene": scene.name,
        "scene_seed": scene.seed,
        "script": asdict(script),
        "sim": asdict(config),
    }
    return SensorRun(gyro_t, gyro_w, scan_t, scans, truth_t, truth, k, CAMERA_IN_BODY, meta)


def corrupt_scan(run: SensorRun, index: int, seed: int = 0) -> SensorRun:
    """Copy of ``run`` whose scan ``index`` has its valid depths randomly permuted.

    The pixel mask and depth histogram survive, the geometry does not.
    """
    img = run.scans[index]
    depth = img.depth.copy()
    valid = np.isfinite(depth)
    depth[valid] = np.random.default_rng(seed).permutation(depth[valid])
    scans = list(run.scans)
    scans[index] = DepthImage(depth, img.intrinsics)
    meta = dict(run.meta, corrupted_scan=index)
    return replace(run, scans=scans, meta=meta)


# --- serialisation ---------------------------------------------------------------


def _pose_row(p: Pose) -> list[float]:
    q = UnitQuaternion.from_matrix(p.rotation)
    return [*p.translation, q.w, q.x, q.y, q.z]


def _pose_from_row(row) -> Pose:
    tx, ty, tz, qw, qx, qy, qz = row
    return Pose(UnitQuaternion.from_array([qw, qx, qy, qz]).to_matrix(), [tx, ty, tz])


def save_run(run: SensorRun, out_dir) -> Path:
    """Write ``gyro.csv``, ``truth.csv``, ``scans/NNNN.depth`` and ``manifest.json``."""
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "gyro.csv", np.column_stack([run.gyro_t, run.gyro_w]), delimiter=",",
               header="t,wx,wy,wz", comments="", fmt="%.17g")
    truth_rows = [[t, *_pose_row(p)] for t, p in zip(run.truth_t, run.truth)]
    np.savetxt(out / "truth.csv", np.array(truth_rows).reshape(-1, 8), delimiter=",",
               header="t,tx,ty,tz,qw,qx,qy,qz", comments="", fmt="%.17g")
    for i, img in enumerate(run.scans):
        write_depth(out / "scans" / f"{i:04d}.depth", img.depth)
    manifest = dict(run.meta)
    manifest["scan_t"] = [float(t) for t in run.scan_t]
    manifest["intrinsics"] = asdict(run.intrinsics)
    manifest["extrinsic"] = _pose_row(run.extrinsic)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_run(in_dir) -> SensorRun:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    gyro = np.loadtxt(src / "gyro.csv", delimiter=",", skiprows=1, ndmin=2)
    truth = np.loadtxt(src / "truth.csv", delimiter=",", skiprows=1, ndmin=2)
    k = Intrinsics(**manifest["intrinsics"])
    scan_t = np.asarray(manifest["scan_t"], dtype=float)
    scans = [DepthImage(read_depth(src / "scans" / f"{i:04d}.depth"), k) for i in range(len(scan_t))]
    meta = {key: v for key, v in manifest.items() if key not in ("scan_t", "intrinsics", "extrinsic")}
    return SensorRun(
        gyro[:, 0], gyro[:, 1:4], scan_t, scans, truth[:, 0],
        [_pose_from_row(r[1:]) for r in truth], k, _pose_from_row(manifest["extrinsic"]), meta,
    )
