"""Invariant EKF on SE(3) fusing gyro dead-reckoning with ICP pose observations.

The estimation error is the ground-frame rigid transformation
``eta = X_hat X^-1 ~ I + hat(zeta)``. Its linearised dynamics do not depend on
the trajectory, so the covariance ``P`` and gain ``K`` evolve through a plain
Riccati recursion driven only by ``M`` (motion noise, per second, ground
frame) and ``N`` (ICP covariance, ground frame).

Two rates:

* :func:`predict` at every gyro sample rotates the estimate in the body frame
  and leaves the translation alone (the gyro says nothing about it);
* :func:`update` at every scan computes the discrete gain, the invariant
  innovation ``K vee(pi(Y X_hat^-1 - I))`` and integrates the correction over
  the inter-scan interval.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg

from .covariance import CONDITION_LIMIT, ObservabilityReport
from .liegroup import (
    Pose,
    Twist,
    UnitQuaternion,
    exp_rotation,
    nearest_rotation,
    project_pi,
    quat_exp,
    quat_integrate,
    quat_multiply,
    vee,
)

CHI2_6DOF_99 = 16.81
GROUND = "ground"
BODY = "body"


class NumericalDegeneracyError(np.linalg.LinAlgError):
    pass


class OutOfOrderError(ValueError):
    pass


def paper_motion_noise() -> np.ndarray:
    """Ground-frame motion noise ``M``: gyro 0.02 rad/s, translation prior 0.5/0.5/0.25 m/s."""
    return np.diag([0.02**2] * 3 + [0.5**2, 0.5**2, 0.25**2])


@dataclass
class NoiseConfig:
    m: np.ndarray = field(default_factory=paper_motion_noise)
    sigma_sensor: float = 0.2

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=float)
        if self.m.shape != (6, 6) or np.linalg.norm(self.m - self.m.T) > 1e-12:
            raise ValueError("m must be a symmetric 6x6 matrix")
        if np.linalg.eigvalsh(self.m)[0] < -1e-12:
            raise ValueError("m must be positive semidefinite")


@dataclass(frozen=True)
class FilterState:
    pose: Pose
    p: np.ndarray
    last_update_time: float = 0.0
    time: float = 0.0  # timestamp of the latest input applied


@dataclass(frozen=True)
class Observation:
    y: Pose
    n: Optional[np.ndarray]
    valid: bool = True
    reason: str = ""


@dataclass(frozen=True)
class UpdateDetails:
    gain: np.ndarray
    innovation: np.ndarray  # vee(pi(Y X_hat^-1 - I)), before the gain
    correction: np.ndarray  # e = K @ innovation


def initial_state(pose: Optional[Pose] = None, p0: float | np.ndarray = 1e-4, time: float = 0.0) -> FilterState:
    p = np.eye(6) * p0 if np.isscalar(p0) else np.asarray(p0, dtype=float)
    return FilterState(pose or Pose.identity(), p, time, time)


def predict(
    state: FilterState, omega_m, dt: float, quaternion: bool = False, exact: bool = True
) -> FilterState:
    """Open-loop gyro step ``R <- R exp((omega_m ^) dt)``, translation unchanged.

    With ``quaternion`` the attitude goes through :func:`quat_integrate`;
    ``exact=False`` selects its first-order step.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    r = state.pose.rotation
    if quaternion:
        q = quat_integrate(UnitQuaternion.from_matrix(r), omega_m, dt, exact)
        r_new = q.to_matrix()
    else:
        r_new = r @ exp_rotation(omega_m, dt)
    return replace(state, pose=Pose(r_new, state.pose.translation), time=state.time + dt)


def discrete_gain(p: np.ndarray, n: np.ndarray, m: np.ndarray, dt_update: float):
    """One step of the discrete Riccati recursion.

    ``K = P (P + N)^-1 / dt`` and ``P_next = M dt + P - P (P + N)^-1 P``.
    ``N`` is the covariance of one observation. Accepts stacked ``(..., 6, 6)``
    inputs.
    """
    if not dt_update > 0:
        raise ValueError("dt_update must be positive")
    p = np.asarray(p, dtype=float)
    s = p + np.asarray(n, dtype=float)
    try:
        g = np.linalg.solve(s, p)  # (P+N)^-1 P, the transpose of P (P+N)^-1
    except np.linalg.LinAlgError as exc:
        raise NumericalDegeneracyError("P + N is singular") from exc
    if not np.all(np.isfinite(g)):
        raise NumericalDegeneracyError("P + N is singular")
    gain_dt = np.swapaxes(g, -1, -2)
    p_next = np.asarray(m, dtype=float) * dt_update + p - gain_dt @ p
    p_next = 0.5 * (p_next + np.swapaxes(p_next, -1, -2))
    return gain_dt / dt_update, p_next


def stationary_gain(m: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Principal square root of ``M N^-1``.

    For symmetric ``M`` and positive-definite ``N`` this is
    ``N^1/2 (N^-1/2 M N^-1/2)^1/2 N^-1/2``; otherwise a Schur-based square
    root is used.
    """
    m = np.asarray(m, dtype=float)
    n = np.asarray(n, dtype=float)
    sym = np.allclose(m, m.T, atol=1e-12) and np.allclose(n, n.T, atol=1e-12)
    if sym:
        lam, v = np.linalg.eigh(n)
        if lam[0] <= 0:
            raise NumericalDegeneracyError("N must be positive definite")
        n_half = (v * np.sqrt(lam)) @ v.T
        n_ihalf = (v / np.sqrt(lam)) @ v.T
        mu, w = np.linalg.eigh(n_ihalf @ m @ n_ihalf)
        if mu[0] >= -1e-12 * max(mu[-1], 1.0):
            s_half = (w * np.sqrt(np.clip(mu, 0.0, None))) @ w.T
            return n_half @ s_half @ n_ihalf
    if np.linalg.cond(n) > 1.0 / np.finfo(float).eps:
        raise NumericalDegeneracyError("N is not invertible")
    root = scipy.linalg.sqrtm(m @ np.linalg.inv(n))
    return np.real_if_close(root)


def innovation(x_hat: Pose, y: Pose, frame: str = GROUND) -> np.ndarray:
    """``vee(pi(Y X_hat^-1 - I))`` (ground) or ``vee(pi(X_hat^-1 Y - I))`` (body)."""
    if frame == GROUND:
        d = y.matrix() @ x_hat.inverse().matrix()
    elif frame == BODY:
        d = x_hat.inverse().matrix() @ y.matrix()
    else:
        raise ValueError(f"unknown frame {frame!r}")
    return vee(project_pi(d - np.eye(4))).vector


def innovation_correction(x_hat: Pose, y: Pose, k: np.ndarray, frame: str = GROUND) -> Twist:
    return Twist.from_vector(np.asarray(k) @ innovation(x_hat, y, frame))


def apply_correction(
    pose: Pose, e: np.ndarray, dt: float, frame: str = GROUND, quaternion: bool = False, exact: bool = True
) -> Pose:
    """Integrate ``dX/dt = E X`` over ``dt`` to first order in translation.

    ``T+ = T + (e_R ^ T + e_T) dt``, ``R+ = exp((e_R ^) dt) R``. The body-frame
    variant right-multiplies instead.
    """
    e_r, e_t = e[:3], e[3:]
    r, t = pose.rotation, pose.translation
    if frame == GROUND:
        t_new = t + (np.cross(e_r, t) + e_t) * dt
        if quaternion:
            qa = UnitQuaternion.from_matrix(r).as_array()
            if exact:
                qa = quat_multiply(quat_exp(e_r * dt), qa)
            else:
                qa = qa + 0.5 * quat_multiply(np.concatenate([[0.0], e_r]), qa) * dt
            r_new = UnitQuaternion.from_array(qa).to_matrix()
        else:
            r_new = exp_rotation(e_r, dt) @ r
    elif frame == BODY:
        t_new = t + r @ e_t * dt
        if quaternion:
            qa = UnitQuaternion.from_matrix(r).as_array()
            if exact:
                qa = quat_multiply(qa, quat_exp(e_r * dt))
            else:
                qa = qa + 0.5 * quat_multiply(qa, np.concatenate([[0.0], e_r])) * dt
            r_new = UnitQuaternion.from_array(qa).to_matrix()
        else:
            r_new = r @ exp_rotation(e_r, dt)
    else:
        raise ValueError(f"unknown frame {frame!r}")
    return Pose(r_new, t_new)


def update_step(
    state: FilterState,
    obs: Observation,
    m: np.ndarray,
    dt_update: float,
    frame: str = GROUND,
    quaternion: bool = False,
    exact: bool = True,
) -> tuple[FilterState, Optional[UpdateDetails]]:
    """Low-rate correction. Invalid observations only grow ``P`` by ``M dt``."""
    if not dt_update > 0:
        raise ValueError("dt_update must be positive")
    if not obs.valid:
        p_next = state.p + np.asarray(m) * dt_update
        return replace(state, p=0.5 * (p_next + p_next.T), last_update_time=state.time), None
    k, p_next = discrete_gain(state.p, obs.n, m, dt_update)
    nu = innovation(state.pose, obs.y, frame)
    e = k @ nu
    pose = apply_correction(state.pose, e, dt_update, frame, quaternion, exact)
    new = replace(state, pose=pose, p=p_next, last_update_time=state.time)
    return new, UpdateDetails(k, nu, e)


def update(
    state: FilterState,
    obs: Observation,
    m: np.ndarray,
    dt_update: float,
    frame: str = GROUND,
    quaternion: bool = False,
    exact: bool = True,
) -> FilterState:
    return update_step(state, obs, m, dt_update, frame, quaternion, exact)[0]


def renormalize(state: FilterState) -> FilterState:
    """Project the rotation back onto SO(3) to remove floating-point drift."""
    pose = Pose(nearest_rotation(state.pose.rotation), state.pose.translation)
    return replace(state, pose=pose)


@dataclass(frozen=True)
class Gates:
    residual: Optional[float] = None  # meters; None means 3 sigma_sensor
    chi2: float = CHI2_6DOF_99
    condition_limit: float = CONDITION_LIMIT


def reject_observation(
    result,
    report: Optional[ObservabilityReport],
    gates: Gates = Gates(),
    sigma: float = 0.2,
    innovation_vector: Optional[np.ndarray] = None,
    p: Optional[np.ndarray] = None,
    n: Optional[np.ndarray] = None,
) -> tuple[bool, str]:
    """Decide whether an ICP registration may be fused; returns ``(valid, reason)``.

    Gates, in order: convergence, mean residual, conditioning of the Fisher
    matrix, and the Mahalanobis distance of the innovation under ``P + N``
    against the 99% chi-square quantile for 6 dof. ``reason`` names every
    failing gate, comma separated.
    """
    failed = []
    if not result.converged:
        failed.append("no convergence")
    residual_gate = gates.residual if gates.residual is not None else 3.0 * sigma
    if not result.final_mean_residual <= residual_gate:
        failed.append("residual gate")
    if report is not None and not report.condition_number < gates.condition_limit:
        failed.append("ill-conditioned")
    if innovation_vector is not None and p is not None and n is not None:
        z = np.asarray(innovation_vector)
        d2 = float(z @ np.linalg.solve(np.asarray(p) + np.asarray(n), z))
        if not d2 <= gates.chi2:
            failed.append("mahalanobis gate")
    return not failed, ", ".join(failed)


# --- filter log -----------------------------------------------------------------

LOG_COLUMNS = [
    "time_s", "tx", "ty", "tz", "qw", "qx", "qy", "qz",
    "trace_P_rot", "trace_P_trans", "obs_valid", "rejection_reason",
]


def log_row(state: FilterState, obs_valid: Optional[bool] = None, reason: str = "") -> dict:
    q = UnitQuaternion.from_matrix(state.pose.rotation)
    t = state.pose.translation
    return {
        "time_s": state.time,
        "tx": t[0], "ty": t[1], "tz": t[2],
        "qw": q.w, "qx": q.x, "qy": q.y, "qz": q.z,
        "trace_P_rot": float(np.trace(state.p[:3, :3])),
        "trace_P_trans": float(np.trace(state.p[3:, 3:])),
        "obs_valid": "" if obs_valid is None else int(obs_valid),
        "rejection_reason": reason,
    }


def write_filter_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})
