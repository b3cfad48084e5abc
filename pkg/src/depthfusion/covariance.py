"""Fisher information and covariance of a point-to-point ICP pose estimate.

Twist coordinates are ordered ``(omega, mu)`` and expressed in the ground
(map) frame: a small correction ``dX ~ I + hat(x)`` acts on the left of the
pose. Each matched target point ``q`` contributes ``B^T B`` with
``B = (skew(q), -I)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .liegroup import skew

DEFAULT_SIGMA = 0.2
CONDITION_LIMIT = 1e12


class UnobservableRegistrationError(np.linalg.LinAlgError):
    """Fisher matrix is singular or too ill-conditioned to invert."""

    def __init__(self, message: str, report: "ObservabilityReport"):
        super().__init__(message)
        self.report = report


@dataclass
class ObservabilityReport:
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # columns, matching eigenvalues
    weak: np.ndarray  # boolean mask over eigenpairs
    condition_number: float

    @property
    def weak_directions(self) -> list[np.ndarray]:
        return [self.eigenvectors[:, i] for i in np.flatnonzero(self.weak)]

    @property
    def is_well_conditioned(self) -> bool:
        return self.condition_number < CONDITION_LIMIT


def _as_points(points) -> np.ndarray:
    q = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(q) == 0:
        raise ValueError("at least one point is required")
    if not np.all(np.isfinite(q)):
        raise ValueError("points must be finite")
    return q


def information_sum(points, recenter: bool = False) -> np.ndarray:
    """``sum_i B_i^T B_i`` in closed form.

    With ``s = sum q_i`` and ``S = sum |q_i|^2`` the blocks are
    ``[[S I - Q^T Q, skew(s)], [-skew(s), n I]]``.
    """
    q = _as_points(points)
    if recenter:
        q = q - q.mean(axis=0)
    n = len(q)
    s = q.sum(axis=0)
    info = np.empty((6, 6))
    info[:3, :3] = np.eye(3) * float(np.einsum("ij,ij->", q, q)) - q.T @ q
    info[:3, 3:] = skew(s)
    info[3:, :3] = -skew(s)
    info[3:, 3:] = n * np.eye(3)
    return info


def fisher_matrix(points, sigma: float = DEFAULT_SIGMA, recenter: bool = False) -> np.ndarray:
    """Fisher information of the linearised registration, ``sum B_i^T B_i / sigma^2``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return information_sum(points, recenter) / sigma**2


def analyze_observability(fisher: np.ndarray, threshold: float = 1e-6) -> ObservabilityReport:
    fisher = np.asarray(fisher, dtype=float)
    if np.linalg.norm(fisher - fisher.T) > 1e-9 * max(1.0, np.linalg.norm(fisher)):
        raise ValueError("fisher matrix must be symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (fisher + fisher.T))
    top = vals[-1]
    weak = vals < threshold * top if top > 0 else np.ones(6, dtype=bool)
    cond = float(top / vals[0]) if vals[0] > 0 else float("inf")
    return ObservabilityReport(vals, vecs, weak, cond)


def icp_covariance(
    points, sigma: float = DEFAULT_SIGMA, recenter: bool = False, condition_limit: float = CONDITION_LIMIT
) -> np.ndarray:
    """Covariance ``N = sigma^2 [sum B_i^T B_i]^-1`` of the ICP estimate.

    Raises :class:`UnobservableRegistrationError` (carrying the
    observability report) when the information matrix is ill-conditioned.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    info = information_sum(points, recenter)
    report = analyze_observability(info)
    if not report.condition_number < condition_limit:
        raise UnobservableRegistrationError(
            f"Fisher matrix condition number {report.condition_number:.3g} exceeds {condition_limit:.0e}",
            report,
        )
    inv = np.linalg.inv(info)
    return sigma**2 * 0.5 * (inv + inv.T)


def write_covariance_csv(path, cov: np.ndarray, report: ObservabilityReport | None = None) -> None:
    """Row-major 6x6 matrix, then (optionally) the ascending eigenvalues."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.asarray(cov):
            w.writerow([f"{v:.17g}" for v in row])
        if report is not None:
            w.writerow([f"{v:.17g}" for v in report.eigenvalues])


def read_covariance_csv(path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in r] for r in csv.reader(fh) if r]
    cov = np.array(rows[:6])
    eig = np.array(rows[6]) if len(rows) > 6 else None
    return cov, eig
