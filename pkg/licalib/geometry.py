"""Quaternion and rotation-group primitives.

Conventions used across the package:

* quaternions are stored as ``[x, y, z, w]`` (vector part first), which is
  also the scalar-last order of :class:`scipy.spatial.transform.Rotation`;
* products follow the Hamilton rule;
* rotation perturbations are applied on the right, ``R <- R Exp(delta)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

from licalib.errors import InvalidArgumentError

SMALL_ANGLE = 1e-8
UNIT_TOLERANCE = 1e-6
IDENTITY_QUAT = np.array([0.0, 0.0, 0.0, 1.0])

FloatArray = NDArray[np.float64]


def _as_vector(value: ArrayLike, size: int, name: str) -> FloatArray:
    array = np.asarray(value, dtype=float)
    if array.shape != (size,):
        raise InvalidArgumentError(f"{name} must have shape ({size},), got {array.shape}")
    if not np.all(np.isfinite(array)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return array


def _as_unit_quat(q: ArrayLike) -> FloatArray:
    quat = _as_vector(q, 4, "quaternion")
    norm = np.linalg.norm(quat)
    if abs(norm - 1.0) > UNIT_TOLERANCE:
        raise InvalidArgumentError(f"quaternion is not unit norm (|q| = {norm:.9f})")
    return quat


def skew(v: ArrayLike) -> FloatArray:
    """Return the cross-product matrix of ``v``; accepts stacked ``(..., 3)`` input."""

    vec = np.asarray(v, dtype=float)
    out = np.zeros(vec.shape[:-1] + (3, 3))
    out[..., 0, 1] = -vec[..., 2]
    out[..., 0, 2] = vec[..., 1]
    out[..., 1, 0] = vec[..., 2]
    out[..., 1, 2] = -vec[..., 0]
    out[..., 2, 0] = -vec[..., 1]
    out[..., 2, 1] = vec[..., 0]
    return out


def vee(m: ArrayLike) -> FloatArray:
    """Inverse of :func:`skew` for the antisymmetric part of ``m``."""

    mat = np.asarray(m, dtype=float)
    return 0.5 * np.stack(
        [mat[..., 2, 1] - mat[..., 1, 2], mat[..., 0, 2] - mat[..., 2, 0], mat[..., 1, 0] - mat[..., 0, 1]],
        axis=-1,
    )


def so3_exp(phi: ArrayLike) -> FloatArray:
    """Map a rotation vector (radians) to a unit quaternion."""

    vec = _as_vector(phi, 3, "rotation vector")
    theta = float(np.linalg.norm(vec))
    if theta < SMALL_ANGLE:
        quat = np.append(0.5 * vec, 1.0)
        return quat / np.linalg.norm(quat)
    half = 0.5 * theta
    return np.append(np.sin(half) * vec / theta, np.cos(half))


def so3_log(q: ArrayLike) -> FloatArray:
    """Map a unit quaternion to its rotation vector with norm at most pi."""

    quat = quat_canonical(_as_unit_quat(q))
    quat = quat / np.linalg.norm(quat)
    v, w = quat[:3], quat[3]
    v_norm = float(np.linalg.norm(v))
    if v_norm < SMALL_ANGLE:
        return 2.0 * v / w * (1.0 - v_norm**2 / (3.0 * w * w))
    theta = 2.0 * np.arctan2(v_norm, w)
    return theta * v / v_norm


def quat_multiply(q1: ArrayLike, q2: ArrayLike) -> FloatArray:
    """Hamilton product ``q1 * q2``."""

    a = np.asarray(q1, dtype=float)
    b = np.asarray(q2, dtype=float)
    v1, w1 = a[:3], a[3]
    v2, w2 = b[:3], b[3]
    return np.append(w1 * v2 + w2 * v1 + np.cross(v1, v2), w1 * w2 - v1 @ v2)


def quat_conjugate(q: ArrayLike) -> FloatArray:
    quat = np.asarray(q, dtype=float)
    return np.append(-quat[:3], quat[3])


def quat_normalize(q: ArrayLike) -> FloatArray:
    quat = np.asarray(q, dtype=float)
    norm = np.linalg.norm(quat, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise InvalidArgumentError("cannot normalize a zero quaternion")
    return quat / norm


def quat_canonical(q: ArrayLike) -> FloatArray:
    """Flip sign so that ``w >= 0`` (works on stacked quaternions)."""

    quat = np.array(q, dtype=float)
    sign = np.where(quat[..., 3:4] < 0.0, -1.0, 1.0)
    return quat * sign


def quat_mul_matrices(q: ArrayLike) -> tuple[FloatArray, FloatArray]:
    """Return ``(L, R)`` with ``L(q1) q2 = q1 * q2 = R(q2) q1``."""

    quat = _as_unit_quat(q)
    v, w = quat[:3], quat[3]
    left = np.empty((4, 4))
    left[:3, :3] = w * np.eye(3) + skew(v)
    left[:3, 3] = v
    left[3, :3] = -v
    left[3, 3] = w
    right = left.copy()
    right[:3, :3] = w * np.eye(3) - skew(v)
    return left, right


def quat_to_matrix(q: ArrayLike) -> FloatArray:
    return Rotation.from_quat(np.asarray(q, dtype=float)).as_matrix()


def matrix_to_quat(rotation: ArrayLike) -> FloatArray:
    return quat_canonical(Rotation.from_matrix(np.asarray(rotation, dtype=float)).as_quat())


def exp_matrix(phi: ArrayLike) -> FloatArray:
    """Rotation matrices for stacked rotation vectors ``(..., 3)``."""

    vec = np.asarray(phi, dtype=float)
    flat = Rotation.from_rotvec(vec.reshape(-1, 3)).as_matrix()
    return flat.reshape(vec.shape[:-1] + (3, 3))


def log_matrix(rotation: ArrayLike) -> FloatArray:
    """Rotation vectors for stacked rotation matrices ``(..., 3, 3)``."""

    mat = np.asarray(rotation, dtype=float)
    flat = Rotation.from_matrix(mat.reshape(-1, 3, 3)).as_rotvec()
    return flat.reshape(mat.shape[:-2] + (3,))


def so3_right_jacobian(phi: ArrayLike) -> FloatArray:
    """Right Jacobian of the exponential map, ``Exp(phi + d) ~ Exp(phi) Exp(Jr d)``."""

    vec = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(vec, axis=-1)[..., None, None]
    k = skew(vec)
    k2 = k @ k
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    b = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (safe - np.sin(safe)) / safe**3)
    return np.eye(3) - a * k + b * k2


def so3_right_jacobian_inverse(phi: ArrayLike) -> FloatArray:
    vec = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(vec, axis=-1)[..., None, None]
    k = skew(vec)
    k2 = k @ k
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    c = np.where(
        small,
        1.0 / 12.0 + theta**2 / 720.0,
        1.0 / safe**2 - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
    )
    return np.eye(3) + 0.5 * k + c * k2


def euler_to_matrix(roll: float, pitch: float, yaw: float) -> FloatArray:
    """Intrinsic Z-Y-X Euler angles: ``R = Rz(yaw) Ry(pitch) Rx(roll)``."""

    return Rotation.from_euler("ZYX", [yaw, pitch, roll]).as_matrix()


def matrix_to_euler(rotation: ArrayLike) -> FloatArray:
    """Return ``(roll, pitch, yaw)`` for the convention of :func:`euler_to_matrix`."""

    yaw, pitch, roll = Rotation.from_matrix(np.asarray(rotation, dtype=float)).as_euler("ZYX")
    return np.array([roll, pitch, yaw])


def gravity_tangent_basis(gravity: ArrayLike) -> FloatArray:
    """Two orthonormal columns spanning the plane orthogonal to ``gravity``."""

    g = np.asarray(gravity, dtype=float)
    axis = g / np.linalg.norm(g)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    first = np.cross(axis, helper)
    first /= np.linalg.norm(first)
    second = np.cross(axis, first)
    return np.column_stack([first, second])


@dataclass(frozen=True)
class RigidTransform:
    """Rotation plus translation; maps points ``x -> R x + t``."""

    rotation: FloatArray
    translation: FloatArray

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> RigidTransform:
        mat = np.asarray(matrix, dtype=float)
        return cls(mat[:3, :3].copy(), mat[:3, 3].copy())

    def compose(self, other: RigidTransform) -> RigidTransform:
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> RigidTransform:
        rot_t = self.rotation.T
        return RigidTransform(rot_t, -rot_t @ self.translation)

    def apply(self, points: ArrayLike) -> FloatArray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def as_matrix(self) -> FloatArray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat
