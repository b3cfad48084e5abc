"""Point clouds, depth images, exact nearest-neighbour matching and file I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Optional

import numpy as np
from scipy.ndimage import median_filter
from scipy.spatial import cKDTree

from .liegroup import Pose

DEPTH_HEADER = struct.Struct("<II")


@dataclass
class PointCloud:
    points: np.ndarray
    grid: Optional[np.ndarray] = None  # (n, 2) integer (row, col) of the source pixel

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.grid is not None:
            self.grid = np.asarray(self.grid, dtype=np.int64).reshape(-1, 2)
            if len(self.grid) != len(self.points):
                raise ValueError("grid provenance must have one entry per point")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))

    def transformed(self, pose: Pose) -> "PointCloud":
        return PointCloud(pose.apply(self.points), self.grid)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.points[idx], None if self.grid is None else self.grid[idx])

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)


def pack_voxel_keys(points: np.ndarray, voxel: float) -> Optional[np.ndarray]:
    """One int64 per point whose order matches the lexicographic order of the
    integer voxel coordinates; ``None`` when a coordinate does not fit in 21 bits."""
    cells = np.floor(np.asarray(points, dtype=float) / voxel)
    if len(cells) and np.abs(cells).max() >= _KEY_OFFSET:
        return None
    k = cells.astype(np.int64) + _KEY_OFFSET
    return (k[:, 0] << (2 * _KEY_BITS)) | (k[:, 1] << _KEY_BITS) | k[:, 2]


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Replace the points of each occupied voxel by their centroid.

    Output order follows the lexicographic order of voxel keys, so the result
    does not depend on input order beyond float summation.
    """
    points = np.asarray(points, dtype=float)
    if voxel <= 0 or len(points) == 0:
        return points.copy()
    keys = pack_voxel_keys(points, voxel)
    if keys is None:
        keys = np.floor(points / voxel).astype(np.int64)
        _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    else:
        _, inv, counts = np.unique(keys, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    sums = np.column_stack([np.bincount(inv, weights=points[:, a], minlength=len(counts)) for a in range(3)])
    return sums / counts[:, None]


class Correspondence(NamedTuple):
    source_index: int
    target_index: int
    squared_distance: float


@dataclass
class Correspondences:
    """Column-wise storage of closest-point matches."""

    source_index: np.ndarray
    target_index: np.ndarray
    squared_distance: np.ndarray

    def __len__(self) -> int:
        return len(self.source_index)

    def __iter__(self) -> Iterator[Correspondence]:
        for s, t, d in zip(self.source_index, self.target_index, self.squared_distance):
            yield Correspondence(int(s), int(t), float(d))


class SpatialIndex:
    """Exact nearest-neighbour index; ties resolve to the lowest target index."""

    def __init__(self, cloud: PointCloud | np.ndarray):
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
        if len(pts) == 0:
            raise ValueError("cannot index an empty cloud")
        self.points = np.ascontiguousarray(pts, dtype=float)
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries: np.ndarray, max_distance: float = np.inf) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(squared_distance, index)`` of the nearest stored point.

        Queries with no stored point within ``max_distance`` get distance
        ``inf`` and index ``-1``.
        """
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        if len(q) == 0:
            return np.zeros(0), np.zeros(0, dtype=np.int64)
        n = len(self.points)
        k = min(2, n)
        dist, idx = self._tree.query(q, k=k, distance_upper_bound=max_distance)
        if k == 1:
            dist, idx = dist[:, None], idx[:, None]
        found = np.isfinite(dist[:, 0])
        best = np.where(found, idx[:, 0], -1)
        if k > 1:
            for r in np.flatnonzero(found & (dist[:, 1] == dist[:, 0])):
                # exact tie: collect every point at that distance
                cand = np.asarray(self._tree.query_ball_point(q[r], dist[r, 0] * (1 + 1e-12) + 1e-300))
                d2 = ((self.points[cand] - q[r]) ** 2).sum(axis=1)
                best[r] = cand[d2 == d2.min()].min()
        d2 = np.full(len(q), np.inf)
        d2[found] = ((self.points[best[found]] - q[found]) ** 2).sum(axis=1)
        return d2, best.astype(np.int64)


def build_index(cloud: PointCloud) -> SpatialIndex:
    return SpatialIndex(cloud)


def match_closest(
    source: PointCloud | np.ndarray, target_index: SpatialIndex, max_distance: float
) -> Correspondences:
    """Pair each source point with its nearest target point within ``max_distance``."""
    if not max_distance > 0:
        raise ValueError("max_distance must be positive")
    pts = source.points if isinstance(source, PointCloud) else np.asarray(source, dtype=float)
    # slack so the exact squared-distance test below decides the boundary
    d2, idx = target_index.query(pts, max_distance * (1 + 1e-9))
    keep = d2 <= max_distance * max_distance
    src = np.flatnonzero(keep)
    return Correspondences(src, idx[keep], d2[keep])


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float = 60.0) -> "Intrinsics":
        f = (width / 2.0) / np.tan(np.radians(hfov_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0)


@dataclass
class DepthImage:
    """Per-pixel depth (z along the optical axis) in meters; NaN marks no return."""

    depth: np.ndarray
    intrinsics: Intrinsics

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        if self.depth.ndim != 2:
            raise ValueError("depth must be a 2-D array")
        valid = self.depth[np.isfinite(self.depth)]
        if np.any(valid <= 0):
            raise ValueError("depth values must be positive or NaN")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.depth)

    def valid_count(self) -> int:
        return int(self.valid_mask.sum())


def depth_to_cloud(img: DepthImage, mask: Optional[np.ndarray] = None) -> PointCloud:
    """Pinhole back-projection of the valid pixels, row-major order."""
    sel = img.valid_mask if mask is None else (mask & img.valid_mask)
    rows, cols = np.nonzero(sel)
    d = img.depth[rows, cols]
    k = img.intrinsics
    pts = np.column_stack([(cols - k.cx) * d / k.fx, (rows - k.cy) * d / k.fy, d])
    return PointCloud(pts, np.column_stack([rows, cols]))


def depth_gradient_mask(img: DepthImage, jump_threshold: float, vertical: bool = False) -> np.ndarray:
    if not jump_threshold > 0:
        raise ValueError("jump_threshold must be positive")
    d = img.depth
    mask = np.zeros(d.shape, dtype=bool)
    with np.errstate(invalid="ignore"):
        jump = np.abs(d[:, 1:] - d[:, :-1]) > jump_threshold
    mask[:, :-1] |= jump
    mask[:, 1:] |= jump
    if vertical:
        with np.errstate(invalid="ignore"):
            vjump = np.abs(d[1:, :] - d[:-1, :]) > jump_threshold
        mask[:-1, :] |= vjump
        mask[1:, :] |= vjump
    return mask


def in_any_view(
    points: np.ndarray, cameras: list[Pose], intrinsics: "Intrinsics", width: int, height: int, margin: float = 0.0
) -> np.ndarray:
    """Mask of points projecting inside the image of at least one camera.

    ``cameras`` map camera coordinates to the points' frame; ``margin``
    shrinks the image border by that many pixels.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    seen = np.zeros(len(pts), dtype=bool)
    k = intrinsics
    for cam in cameras:
        local = (pts - cam.translation) @ cam.rotation  # R^T (p - T), row-wise
        z = local[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = k.fx * local[:, 0] / z + k.cx
            v = k.fy * local[:, 1] / z + k.cy
        seen |= (
            (z > 0)
            & (u >= -0.5 + margin)
            & (u <= width - 0.5 - margin)
            & (v >= -0.5 + margin)
            & (v <= height - 0.5 - margin)
        )
    return seen


def smooth_depth(img: DepthImage, window: int = 5, edge: float = 0.5) -> DepthImage:
    """Edge-aware box filter over the depth image.

    Each valid pixel becomes the mean of the valid pixels in its
    ``window x window`` neighbourhood lying within ``edge`` m of that
    neighbourhood's median, so depth jumps are not blurred. The set of valid
    pixels is kept.
    """
    if window <= 1:
        return img
    if not edge > 0:
        raise ValueError("edge must be positive")
    d = img.depth
    valid = np.isfinite(d)
    med = median_filter(np.where(valid, d, np.inf), size=window, mode="nearest")
    r = window // 2
    pad = np.pad(d, r, mode="constant", constant_values=np.nan)
    num = np.zeros(d.shape)
    den = np.zeros(d.shape)
    h, w = d.shape
    with np.errstate(invalid="ignore"):
        for dy in range(window):
            for dx in range(window):
                nb = pad[dy : dy + h, dx : dx + w]
                ok = np.abs(nb - med) < edge  # False for NaN neighbours
                num += np.where(ok, nb, 0.0)
                den += ok
    out = np.where(valid, np.where(den > 0, num / np.maximum(den, 1), d), np.nan)
    return DepthImage(out, img.intrinsics)


def extract_depth_gradient_points(
    img: DepthImage, jump_threshold: float, vertical: bool = False
) -> PointCloud:
    """Pixels on either side of a depth jump between row neighbours."""
    return depth_to_cloud(img, depth_gradient_mask(img, jump_threshold, vertical))


# --- PLY --------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property double x\nproperty double y\nproperty double z\nend_header\n")
        for x, y, z in points:
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def read_ply(path) -> np.ndarray:
    """Vertex x/y/z of an ASCII or binary little-endian PLY file."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    header = raw[:end].decode("ascii").splitlines()
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if tok[1] == "list":
                raise ValueError(f"{path}: list properties are not supported")
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(f"{path}: unsupported PLY format {fmt!r}")
    if not elements or elements[0][0] != "vertex":
        raise ValueError(f"{path}: vertex element must come first")
    _, count, props = elements[0]
    names = [n for n, _ in props]
    if not {"x", "y", "z"} <= set(names):
        raise ValueError(f"{path}: vertex needs x, y, z properties")
    if fmt == "ascii":
        lines = raw[body_start:].decode("ascii").split("\n")[:count]
        table = np.array([ln.split() for ln in lines], dtype=float).reshape(count, len(props))
        cols = [names.index(c) for c in "xyz"]
        return table[:, cols].astype(float)
    dtype = np.dtype([(n, "<" + t) for n, t in props])
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=body_start)
    return np.column_stack([arr["x"], arr["y"], arr["z"]]).astype(float)


# --- flat binary depth images ---------------------------------------------------


def write_depth(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth)
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_HEADER.pack(w, h))
        fh.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h = DEPTH_HEADER.unpack_from(raw, 0)
    data = np.frombuffer(raw, dtype="<f4", offset=DEPTH_HEADER.size)
    if data.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {data.size}")
    return data.reshape(h, w).astype(float)
