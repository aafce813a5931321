"""Cumulative cubic B-spline trajectory on R3 and SO(3).

Segment ``i`` covers ``[t0 + i*dt, t0 + (i+1)*dt)`` and is controlled by knots
``i..i+3``; the valid query domain is ``[t0, t0 + (N-3)*dt]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike
from scipy import sparse
from scipy.spatial.transform import Rotation

from licalib.errors import DomainError, InvalidArgumentError
from licalib.geometry import (
    FloatArray,
    exp_matrix,
    log_matrix,
    quat_canonical,
    quat_normalize,
    skew,
    so3_right_jacobian,
    so3_right_jacobian_inverse,
)

DEGREE = 3
ORDER = DEGREE + 1
DOMAIN_TOLERANCE = 1e-9

CUMULATIVE_BLENDING = (
    np.array(
        [
            [6.0, 5.0, 1.0, 0.0],
            [0.0, 3.0, 3.0, 0.0],
            [0.0, -3.0, 3.0, 0.0],
            [0.0, 1.0, -2.0, 1.0],
        ]
    )
    / 6.0
)


@dataclass(slots=True)
class RotationEval:
    """Orientation and body rate at a batch of query times.

    ``orientation_jac[:, m]`` and ``omega_jac[:, m]`` are the derivatives with
    respect to a right perturbation of knot ``index + m``.
    """

    index: np.ndarray
    rotation: FloatArray
    omega: FloatArray
    orientation_jac: FloatArray | None = None
    omega_jac: FloatArray | None = None


def _as_times(t: ArrayLike) -> tuple[FloatArray, bool]:
    times = np.asarray(t, dtype=float)
    return np.atleast_1d(times), times.ndim == 0


def cumulative_basis(u: ArrayLike, dt: float, order: int = 0) -> FloatArray:
    """Cumulative blending weights ``lambda`` (shape ``(n, 4)``) or their time derivatives."""

    uu = np.atleast_1d(np.asarray(u, dtype=float))
    ones = np.ones_like(uu)
    zeros = np.zeros_like(uu)
    if order == 0:
        powers = np.stack([ones, uu, uu**2, uu**3], axis=1)
    elif order == 1:
        powers = np.stack([zeros, ones, 2.0 * uu, 3.0 * uu**2], axis=1) / dt
    elif order == 2:
        powers = np.stack([zeros, zeros, 2.0 * ones, 6.0 * uu], axis=1) / dt**2
    else:
        raise InvalidArgumentError(f"unsupported derivative order {order}")
    return powers @ CUMULATIVE_BLENDING


def knot_weights(lam: FloatArray) -> FloatArray:
    """Convert cumulative weights to per-knot weights for the linear translation spline."""

    weights = np.empty_like(lam)
    weights[:, :3] = lam[:, :3] - lam[:, 1:]
    weights[:, 3] = lam[:, 3]
    return weights


@dataclass
class TrajectorySpline:
    """Paired translation and rotation splines sharing one uniform knot grid."""

    t0: float
    dt: float
    positions: FloatArray
    quaternions: FloatArray

    def __post_init__(self) -> None:
        self.positions = np.array(self.positions, dtype=float).reshape(-1, 3)
        self.quaternions = quat_normalize(np.array(self.quaternions, dtype=float).reshape(-1, 4))
        if self.dt <= 0.0:
            raise InvalidArgumentError("knot spacing must be positive")
        if len(self.positions) != len(self.quaternions):
            raise InvalidArgumentError("translation and rotation knot counts differ")
        if len(self.positions) < ORDER:
            raise InvalidArgumentError(f"a cubic spline needs at least {ORDER} knots")
        self.align_hemispheres()

    @classmethod
    def from_constant(
        cls,
        t0: float,
        dt: float,
        num_knots: int,
        position: ArrayLike | None = None,
        quaternion: ArrayLike | None = None,
    ) -> TrajectorySpline:
        pos = np.zeros(3) if position is None else np.asarray(position, dtype=float)
        quat = np.array([0.0, 0.0, 0.0, 1.0]) if quaternion is None else np.asarray(quaternion, dtype=float)
        return cls(t0, dt, np.tile(pos, (num_knots, 1)), np.tile(quat, (num_knots, 1)))

    @classmethod
    def covering(cls, t_start: float, t_end: float, dt: float) -> TrajectorySpline:
        """Identity spline whose domain contains ``[t_start, t_end]``."""

        segments = max(1, math.ceil((t_end - t_start) / dt - 1e-9))
        return cls.from_constant(t_start, dt, segments + DEGREE)

    @property
    def num_knots(self) -> int:
        return len(self.positions)

    @property
    def t_min(self) -> float:
        return self.t0

    @property
    def t_max(self) -> float:
        return self.t0 + (self.num_knots - DEGREE) * self.dt

    def copy(self) -> TrajectorySpline:
        return TrajectorySpline(self.t0, self.dt, self.positions.copy(), self.quaternions.copy())

    def contains(self, t: ArrayLike) -> np.ndarray:
        times = np.asarray(t, dtype=float)
        return (times >= self.t_min - DOMAIN_TOLERANCE) & (times <= self.t_max + DOMAIN_TOLERANCE)

    def knot_index(self, t: ArrayLike) -> tuple[np.ndarray, FloatArray]:
        """Segment index and normalized time ``u`` for each query."""

        times, _ = _as_times(t)
        if not np.all(self.contains(times)):
            bad = times[~self.contains(times)][0]
            raise DomainError(f"spline queried at t={bad:.6f}", self.t_min, self.t_max)
        s = (times - self.t0) / self.dt
        index = np.clip(np.floor(s).astype(int), 0, self.num_knots - ORDER)
        u = np.clip(s - index, 0.0, 1.0)
        return index, u

    def support_knots(self, t: float) -> np.ndarray:
        index, _ = self.knot_index(t)
        return index[0] + np.arange(ORDER)

    def basis(self, t: ArrayLike, order: int = 0) -> tuple[np.ndarray, FloatArray]:
        index, u = self.knot_index(t)
        return index, cumulative_basis(u, self.dt, order)

    def align_hemispheres(self) -> None:
        """Flip control quaternions so consecutive ones have a non-negative dot product."""

        quats = self.quaternions.copy()
        quats[0] = quat_canonical(quats[0])
        for k in range(1, len(quats)):
            if quats[k] @ quats[k - 1] < 0.0:
                quats[k] = -quats[k]
        self.quaternions = quats

    def retract(self, delta_positions: ArrayLike, delta_rotations: ArrayLike) -> None:
        """Apply an additive translation update and a right rotation update in place."""

        self.positions = self.positions + np.asarray(delta_positions, dtype=float)
        updated = Rotation.from_quat(self.quaternions) * Rotation.from_rotvec(np.asarray(delta_rotations))
        self.quaternions = quat_normalize(updated.as_quat())
        self.align_hemispheres()

    # -- translation -----------------------------------------------------------------

    def position_weights(self, t: ArrayLike, order: int = 0) -> tuple[np.ndarray, FloatArray]:
        """Knot indices ``(n, 4)`` and weights ``(n, 4)`` such that ``p = sum w_k p_k``."""

        index, lam = self.basis(t, order)
        return index[:, None] + np.arange(ORDER), knot_weights(lam)

    def position_design(self, t: ArrayLike, order: int = 0) -> sparse.csr_matrix:
        """Sparse map from stacked knot positions to position samples (one row per time)."""

        knots, weights = self.position_weights(t, order)
        rows = np.repeat(np.arange(len(knots)), ORDER)
        return sparse.csr_matrix(
            (weights.ravel(), (rows, knots.ravel())), shape=(len(knots), self.num_knots)
        )

    def eval_derivatives(self, t: ArrayLike, order: int) -> FloatArray:
        times, scalar = _as_times(t)
        knots, weights = self.position_weights(times, order)
        values = np.einsum("nk,nkd->nd", weights, self.positions[knots])
        return values[0] if scalar else values

    def eval_position(self, t: ArrayLike) -> FloatArray:
        return self.eval_derivatives(t, 0)

    # -- rotation --------------------------------------------------------------------

    def rotation_kinematics(self, t: ArrayLike, with_jacobians: bool = False) -> RotationEval:
        times, _ = _as_times(t)
        index, u = self.knot_index(times)
        lam = cumulative_basis(u, self.dt, 0)
        dlam = cumulative_basis(u, self.dt, 1)
        knots = index[:, None] + np.arange(ORDER)
        knot_rot = Rotation.from_quat(self.quaternions).as_matrix()[knots]
        rel = np.swapaxes(knot_rot[:, :-1], -1, -2) @ knot_rot[:, 1:]
        d = log_matrix(rel)
        phi = lam[:, 1:, None] * d
        a = exp_matrix(phi)
        a_t = np.swapaxes(a, -1, -2)

        rotation = knot_rot[:, 0] @ a[:, 0] @ a[:, 1] @ a[:, 2]
        omegas = np.zeros((len(times), 4, 3))
        for j in range(3):
            omegas[:, j + 1] = (
                np.einsum("nab,nb->na", a_t[:, j], omegas[:, j]) + dlam[:, j + 1, None] * d[:, j]
            )
        result = RotationEval(index=index, rotation=rotation, omega=omegas[:, 3])
        if not with_jacobians:
            return result

        eye = np.broadcast_to(np.eye(3), (len(times), 3, 3))
        # tails[:, j] = A_{j+1} ... A_3 for j = 0..3
        tails = np.empty((len(times), 4, 3, 3))
        tails[:, 3] = eye
        for j in range(2, -1, -1):
            tails[:, j] = a[:, j] @ tails[:, j + 1]
        tails_t = np.swapaxes(tails, -1, -2)

        jr = so3_right_jacobian(phi)
        jr_inv = so3_right_jacobian_inverse(d)
        rot_terms = np.empty((len(times), 3, 3, 3))
        rate_terms = np.empty((len(times), 3, 3, 3))
        for j in range(3):
            scaled = lam[:, j + 1, None, None] * jr[:, j]
            rot_terms[:, j] = tails_t[:, j + 1] @ scaled
            rotated_rate = np.einsum("nab,nb->na", a_t[:, j], omegas[:, j])
            inner = skew(rotated_rate) @ scaled + dlam[:, j + 1, None, None] * eye
            rate_terms[:, j] = tails_t[:, j + 1] @ inner

        # d_j depends on knot i+j (Jr^-1) and knot i+j-1 (-Jr^-1 D_j^T)
        next_dep = jr_inv
        prev_dep = -jr_inv @ np.swapaxes(rel, -1, -2)
        orient_jac = np.zeros((len(times), 4, 3, 3))
        omega_jac = np.zeros((len(times), 4, 3, 3))
        orient_jac[:, 0] = tails_t[:, 0]
        for j in range(3):
            orient_jac[:, j + 1] += rot_terms[:, j] @ next_dep[:, j]
            orient_jac[:, j] += rot_terms[:, j] @ prev_dep[:, j]
            omega_jac[:, j + 1] += rate_terms[:, j] @ next_dep[:, j]
            omega_jac[:, j] += rate_terms[:, j] @ prev_dep[:, j]
        result.orientation_jac = orient_jac
        result.omega_jac = omega_jac
        return result

    def orientation_jacobian(self, t: float) -> tuple[np.ndarray, FloatArray]:
        """Support knots and ``(4, 3, 3)`` derivatives of ``R(t)`` w.r.t. right knot perturbations."""

        kin = self.rotation_kinematics(np.array([t]), with_jacobians=True)
        return kin.index[0] + np.arange(ORDER), kin.orientation_jac[0]

    def angular_velocity_jacobian(self, t: float) -> tuple[np.ndarray, FloatArray]:
        kin = self.rotation_kinematics(np.array([t]), with_jacobians=True)
        return kin.index[0] + np.arange(ORDER), kin.omega_jac[0]

    def eval_rotation_matrix(self, t: ArrayLike) -> FloatArray:
        times, scalar = _as_times(t)
        rotation = self.rotation_kinematics(times).rotation
        return rotation[0] if scalar else rotation

    def eval_orientation(self, t: ArrayLike) -> FloatArray:
        times, scalar = _as_times(t)
        quats = quat_canonical(Rotation.from_matrix(self.rotation_kinematics(times).rotation).as_quat())
        return quats[0] if scalar else quats

    def body_angular_velocity(self, t: ArrayLike) -> FloatArray:
        times, scalar = _as_times(t)
        omega = self.rotation_kinematics(times).omega
        return omega[0] if scalar else omega

    def body_acceleration(self, t: ArrayLike, gravity: ArrayLike) -> FloatArray:
        times, scalar = _as_times(t)
        rotation = self.rotation_kinematics(times).rotation
        world = self.eval_derivatives(times, 2) - np.asarray(gravity, dtype=float)
        accel = np.einsum("nba,nb->na", rotation, world)
        return accel[0] if scalar else accel
