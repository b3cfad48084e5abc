"""Point-to-point ICP with a closed-form rigid solve and a gradient-feature pre-alignment."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .liegroup import Pose, compose, rotation_angle
from .pointcloud import (
    DepthImage,
    PointCloud,
    SpatialIndex,
    extract_depth_gradient_points,
    match_closest,
)

log = logging.getLogger(__name__)


class DegenerateConfigurationError(ValueError):
    """Point pairs do not determine a unique rotation."""


class InsufficientOverlapError(RuntimeError):
    """Too few closest-point matches survived the distance gate."""


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 50
    translation_tolerance: float = 1e-5
    rotation_tolerance: float = 1e-5
    max_correspondence_distance: float = 0.9
    min_correspondences: int = 30
    # drop pairs farther than trim_factor x the median match distance (0 keeps all)
    trim_factor: float = 3.0

    def __post_init__(self):
        for name in (
            "max_iterations",
            "translation_tolerance",
            "rotation_tolerance",
            "max_correspondence_distance",
            "min_correspondences",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.trim_factor < 0 or (0 < self.trim_factor < 1):
            raise ValueError("trim_factor must be 0 (off) or at least 1")


@dataclass
class IcpResult:
    transform: Pose
    iterations_used: int
    final_mean_residual: float
    converged: bool
    correspondences_used: int
    # matched pairs of the last iteration, both in the target frame
    source_points: np.ndarray
    target_points: np.ndarray


def solve_rigid(p: np.ndarray, q: np.ndarray) -> Pose:
    """Pose ``X`` minimising ``sum ||X p_i - q_i||^2`` (centred SVD solution).

    The centred cross-covariance ``H = sum (p_i - c_p)(q_i - c_q)^T = U S V^T``
    gives ``R = V diag(1, 1, det(V U^T)) U^T`` and ``T = c_q - R c_p``; the
    determinant factor excludes reflections.
    """
    p = np.asarray(p, dtype=float).reshape(-1, 3)
    q = np.asarray(q, dtype=float).reshape(-1, 3)
    if len(p) != len(q):
        raise ValueError("p and q must have the same length")
    if len(p) < 3:
        raise DegenerateConfigurationError("at least three pairs are required")
    cp = p.mean(axis=0)
    cq = q.mean(axis=0)
    h = (p - cp).T @ (q - cq)
    u, s, vt = np.linalg.svd(h)
    if s[0] <= 0 or s[1] <= 1e-12 * s[0]:
        raise DegenerateConfigurationError(f"cross-covariance rank < 2 (singular values {s})")
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    r = v @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose(r, cq - r @ cp)


def _points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)


def icp_register(
    source: PointCloud | np.ndarray,
    target: PointCloud | np.ndarray,
    initial: Optional[Pose] = None,
    params: IcpParams = IcpParams(),
    target_index: Optional[SpatialIndex] = None,
) -> IcpResult:
    """Register ``source`` onto ``target``; the transform maps source into the target frame.

    Raises :class:`InsufficientOverlapError` when an iteration keeps fewer than
    ``params.min_correspondences`` matches.
    """
    src = _points(source)
    if len(src) == 0 or (target_index is None and len(_points(target)) == 0):
        raise ValueError("both clouds must be nonempty")
    index = target_index if target_index is not None else SpatialIndex(_points(target))
    tgt = index.points
    x = initial if initial is not None else Pose.identity()

    converged = False
    residual = float("nan")
    it = 0
    p_used = q_used = np.zeros((0, 3))
    for it in range(1, params.max_iterations + 1):
        moved = x.apply(src)
        corr = match_closest(moved, index, params.max_correspondence_distance)
        si, ti = corr.source_index, corr.target_index
        if params.trim_factor > 0 and len(corr):
            d2 = corr.squared_distance
            keep = d2 <= params.trim_factor**2 * np.median(d2)
            si, ti = si[keep], ti[keep]
        if len(si) < params.min_correspondences:
            raise InsufficientOverlapError(
                f"{len(si)} correspondences < {params.min_correspondences} at iteration {it}"
            )
        p_used = moved[si]
        q_used = tgt[ti]
        step = solve_rigid(p_used, q_used)
        x = compose(step, x)
        p_used = step.apply(p_used)
        residual = float(np.linalg.norm(p_used - q_used, axis=1).mean())
        log.debug("icp iter %d: %d matches, mean residual %.6f", it, len(si), residual)
        if (
            rotation_angle(step.rotation) < params.rotation_tolerance
            and np.linalg.norm(step.translation) < params.translation_tolerance
        ):
            converged = True
            break

    return IcpResult(
        transform=x,
        iterations_used=it,
        final_mean_residual=residual,
        converged=converged,
        correspondences_used=len(q_used),
        source_points=p_used,
        target_points=q_used,
    )


def coarse_align(
    source_img: DepthImage,
    target_features: PointCloud | np.ndarray,
    initial: Pose,
    params: IcpParams = IcpParams(),
    jump_threshold: float = 0.8,
    max_iterations: int = 10,
    extrinsic: Optional[Pose] = None,
    vertical: bool = False,
) -> Pose:
    """Refine ``initial`` by a few ICP iterations between depth-jump feature clouds.

    ``extrinsic`` maps camera coordinates into the body frame registered by
    ``initial``. Any failure (no features, too little overlap, degenerate
    pairs) returns ``initial`` unchanged.
    """
    feats = extract_depth_gradient_points(source_img, jump_threshold, vertical)
    tgt = _points(target_features)
    if len(feats) == 0 or len(tgt) == 0:
        return initial
    pts = feats.points if extrinsic is None else extrinsic.apply(feats.points)
    coarse = replace(
        params,
        max_iterations=max_iterations,
        min_correspondences=min(params.min_correspondences, max(3, len(pts) // 4)),
    )
    try:
        res = icp_register(pts, tgt, initial, coarse)
    except (InsufficientOverlapError, DegenerateConfigurationError):
        return initial
    return res.transform
