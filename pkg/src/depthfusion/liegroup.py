"""SE(3) / SO(3) arithmetic used by the registration and filtering code.

Conventions
-----------
* A pose maps body coordinates to ground coordinates: ``x_ground = R @ x_body + T``.
* Twists are 6-vectors ordered ``(omega, mu)``: rotational part first.
* Quaternions are Hamilton, stored ``(w, x, y, z)``.
* Radians, meters, seconds everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

SKEW_TOLERANCE = 1e-9
_SMALL_ANGLE = 1e-8


def skew(v) -> np.ndarray:
    """Matrix of the cross product ``v ^ .``."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def unskew(a: np.ndarray) -> np.ndarray:
    return np.array([a[2, 1], a[0, 2], a[1, 0]], dtype=float)


@dataclass(frozen=True)
class Twist:
    """Element of se(3) in vector form."""

    omega: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float).reshape(3))
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float).reshape(3))
        if not (np.all(np.isfinite(self.omega)) and np.all(np.isfinite(self.mu))):
            raise ValueError("twist entries must be finite")

    @classmethod
    def from_vector(cls, v) -> "Twist":
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(v[:3], v[3:])

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.mu])

    def __array__(self, dtype=None, copy=None):
        v = self.vector
        return v if dtype is None else v.astype(dtype)

    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


@dataclass(frozen=True)
class Pose:
    """Rigid transformation ``(R, T)`` in SE(3)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_quaternion(cls, q: "UnitQuaternion", translation) -> "Pose":
        return cls(q.to_matrix(), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Map body-frame points (``(3,)`` or ``(n, 3)``) to the ground frame."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def quaternion(self) -> "UnitQuaternion":
        return UnitQuaternion.from_matrix(self.rotation)

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return (
            np.linalg.norm(r.T @ r - np.eye(3)) <= tol
            and abs(np.linalg.det(r) - 1.0) <= tol
            and bool(np.all(np.isfinite(self.translation)))
        )


def compose(a: Pose, b: Pose) -> Pose:
    """``a * b``: apply ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def _as_twist_vector(t) -> np.ndarray:
    if isinstance(t, Twist):
        return t.vector
    return np.asarray(t, dtype=float).reshape(6)


def hat(t) -> np.ndarray:
    """4x4 se(3) matrix of a twist (the operator H)."""
    v = _as_twist_vector(t)
    m = np.zeros((4, 4))
    m[:3, :3] = skew(v[:3])
    m[:3, 3] = v[3:]
    return m


def vee(m: np.ndarray) -> Twist:
    """Inverse of :func:`hat`. Rejects matrices that are not exactly in se(3).

    Callers holding a generic near-identity displacement must run
    :func:`project_pi` first.
    """
    m = np.asarray(m, dtype=float)
    if m.shape != (4, 4):
        raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
    a = m[:3, :3]
    if np.linalg.norm(a + a.T) > SKEW_TOLERANCE or np.any(np.abs(m[3]) > SKEW_TOLERANCE):
        raise ValueError("matrix is not in se(3); apply project_pi before vee")
    return Twist(unskew(a), m[:3, 3])


def project_pi(m: np.ndarray) -> np.ndarray:
    """Projection of a 4x4 matrix onto se(3): ``(R, T) -> ((R - R^T) / 2, T)``."""
    m = np.asarray(m, dtype=float)
    out = np.zeros((4, 4))
    out[:3, :3] = 0.5 * (m[:3, :3] - m[:3, :3].T)
    out[:3, 3] = m[:3, 3]
    return out


def exp_rotation(omega, dt: float = 1.0) -> np.ndarray:
    """``exp((omega ^ .) dt)`` by Rodrigues' formula."""
    phi = np.asarray(omega, dtype=float).reshape(3) * dt
    theta = float(np.linalg.norm(phi))
    k = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def rotation_vector(r: np.ndarray) -> np.ndarray:
    """SO(3) logarithm as a rotation vector."""
    return Rotation.from_matrix(np.asarray(r, dtype=float)).as_rotvec()


def rotation_angle(r: np.ndarray) -> float:
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Closest orthonormal matrix (Frobenius) with determinant +1."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def adjoint(p: Pose) -> np.ndarray:
    """Matrix ``Ad`` with ``hat(Ad @ x) = X hat(x) X^-1`` for twists ordered (omega, mu)."""
    ad = np.zeros((6, 6))
    ad[:3, :3] = p.rotation
    ad[3:, 3:] = p.rotation
    ad[3:, :3] = skew(p.translation) @ p.rotation
    return ad


@dataclass(frozen=True)
class UnitQuaternion:
    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = float(np.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2))
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"quaternion norm {n} is not 1")

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, q) -> "UnitQuaternion":
        q = np.asarray(q, dtype=float)
        q = q / np.linalg.norm(q)
        return cls(*map(float, q))

    @classmethod
    def from_matrix(cls, r: np.ndarray) -> "UnitQuaternion":
        x, y, z, w = Rotation.from_matrix(np.asarray(r, dtype=float)).as_quat()
        if w < 0:
            w, x, y, z = -w, -x, -y, -z
        return cls.from_array([w, x, y, z])

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def to_matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def __mul__(self, other: "UnitQuaternion") -> "UnitQuaternion":
        return UnitQuaternion.from_array(quat_multiply(self.as_array(), other.as_array()))


def quat_multiply(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Hamilton product of raw ``(w, x, y, z)`` arrays (no normalisation)."""
    pw, pv = p[0], p[1:]
    qw, qv = q[0], q[1:]
    return np.concatenate([[pw * qw - pv @ qv], pw * qv + qw * pv + np.cross(pv, qv)])


def quat_exp(phi) -> np.ndarray:
    """Unit quaternion of the rotation vector ``phi``."""
    phi = np.asarray(phi, dtype=float).reshape(3)
    half = 0.5 * float(np.linalg.norm(phi))
    if half < _SMALL_ANGLE:
        return np.concatenate([[1.0 - half * half / 2.0], 0.5 * phi])
    return np.concatenate([[np.cos(half)], np.sin(half) / (2.0 * half) * phi])


def quat_integrate(
    q: UnitQuaternion, omega, dt: float, exact: bool = False
) -> UnitQuaternion:
    """Propagate an attitude quaternion by a body rate held over ``dt``.

    The default is the explicit first-order step ``q + (q * omega / 2) dt``
    followed by normalisation; its per-step angle error is about
    ``|omega dt|^3 / 12``. ``exact=True`` multiplies by the closed-form
    quaternion exponential instead and agrees with :func:`exp_rotation` to
    round-off.
    """
    omega = np.asarray(omega, dtype=float).reshape(3)
    if np.linalg.norm(omega) * dt >= np.pi:
        raise ValueError("rotation per step must stay below pi")
    qa = q.as_array()
    if exact:
        out = quat_multiply(qa, quat_exp(omega * dt))
    else:
        out = qa + 0.5 * quat_multiply(qa, np.concatenate([[0.0], omega])) * dt
    return UnitQuaternion.from_array(out)
