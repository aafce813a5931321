"""IMU and LiDAR measurement models with analytic Jacobians."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike

from licalib.errors import InvalidArgumentError
from licalib.geometry import (
    IDENTITY_QUAT,
    FloatArray,
    RigidTransform,
    exp_matrix,
    gravity_tangent_basis,
    quat_normalize,
    quat_to_matrix,
    skew,
)
from licalib.spline import TrajectorySpline

GRAVITY_NORM = 9.8
LIDAR_INTRINSIC_NAMES = ("d_elevation", "d_azimuth", "vertical", "horizontal", "scale", "range_offset")
IMU_INTRINSIC_NAMES = (
    "gyro_scale_x",
    "gyro_scale_y",
    "gyro_scale_z",
    "gyro_mis_xy",
    "gyro_mis_xz",
    "gyro_mis_yz",
    "accel_scale_x",
    "accel_scale_y",
    "accel_scale_z",
    "accel_mis_xy",
    "accel_mis_xz",
    "accel_mis_yz",
    "gyro_rot_x",
    "gyro_rot_y",
    "gyro_rot_z",
)


def misalignment_matrix(entries: ArrayLike) -> FloatArray:
    """Upper-triangular unit matrix ``[[1, m1, m2], [0, 1, m3], [0, 0, 1]]``."""

    m1, m2, m3 = np.asarray(entries, dtype=float)
    return np.array([[1.0, m1, m2], [0.0, 1.0, m3], [0.0, 0.0, 1.0]])


def scale_misalignment_jacobian(scale: FloatArray, entries: FloatArray, v: FloatArray) -> FloatArray:
    """Derivative of ``diag(scale) M v`` w.r.t. ``[s0, s1, s2, m1, m2, m3]``; shape ``(n, 3, 6)``."""

    m1, m2, m3 = entries
    jac = np.zeros((len(v), 3, 6))
    jac[:, 0, 0] = v[:, 0] + m1 * v[:, 1] + m2 * v[:, 2]
    jac[:, 1, 1] = v[:, 1] + m3 * v[:, 2]
    jac[:, 2, 2] = v[:, 2]
    jac[:, 0, 3] = scale[0] * v[:, 1]
    jac[:, 0, 4] = scale[0] * v[:, 2]
    jac[:, 1, 5] = scale[1] * v[:, 2]
    return jac


@dataclass
class ImuIntrinsics:
    """Gyro/accel scale and misalignment, gyro frame rotation, fixed-zero g-sensitivity."""

    gyro_scale: FloatArray = field(default_factory=lambda: np.ones(3))
    gyro_misalignment: FloatArray = field(default_factory=lambda: np.zeros(3))
    accel_scale: FloatArray = field(default_factory=lambda: np.ones(3))
    accel_misalignment: FloatArray = field(default_factory=lambda: np.zeros(3))
    gyro_rotation: FloatArray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    g_sensitivity: FloatArray = field(default_factory=lambda: np.zeros((3, 3)))

    def __post_init__(self) -> None:
        self.gyro_scale = np.asarray(self.gyro_scale, dtype=float)
        self.accel_scale = np.asarray(self.accel_scale, dtype=float)
        self.gyro_misalignment = np.asarray(self.gyro_misalignment, dtype=float)
        self.accel_misalignment = np.asarray(self.accel_misalignment, dtype=float)
        self.gyro_rotation = quat_normalize(self.gyro_rotation)
        if np.any(self.gyro_scale <= 0.0) or np.any(self.accel_scale <= 0.0):
            raise InvalidArgumentError("IMU scale factors must be positive")

    def copy(self) -> ImuIntrinsics:
        return ImuIntrinsics(
            self.gyro_scale.copy(),
            self.gyro_misalignment.copy(),
            self.accel_scale.copy(),
            self.accel_misalignment.copy(),
            self.gyro_rotation.copy(),
            self.g_sensitivity.copy(),
        )

    def gyro_matrix(self) -> FloatArray:
        scale_mis = np.diag(self.gyro_scale) @ misalignment_matrix(self.gyro_misalignment)
        return scale_mis @ self.gyro_rotation_matrix()

    def accel_matrix(self) -> FloatArray:
        return np.diag(self.accel_scale) @ misalignment_matrix(self.accel_misalignment)

    def gyro_rotation_matrix(self) -> FloatArray:
        return quat_to_matrix(self.gyro_rotation)


@dataclass
class ImuNavState:
    """Gravity in the trajectory frame and the two bias vectors."""

    gravity: FloatArray = field(default_factory=lambda: np.array([0.0, 0.0, -GRAVITY_NORM]))
    gyro_bias: FloatArray = field(default_factory=lambda: np.zeros(3))
    accel_bias: FloatArray = field(default_factory=lambda: np.zeros(3))
    gravity_norm: float = GRAVITY_NORM

    def __post_init__(self) -> None:
        g = np.asarray(self.gravity, dtype=float)
        self.gravity = g / np.linalg.norm(g) * self.gravity_norm
        self.gyro_bias = np.asarray(self.gyro_bias, dtype=float)
        self.accel_bias = np.asarray(self.accel_bias, dtype=float)

    def copy(self) -> ImuNavState:
        return ImuNavState(
            self.gravity.copy(), self.gyro_bias.copy(), self.accel_bias.copy(), self.gravity_norm
        )

    def gravity_jacobian(self) -> FloatArray:
        """Derivative of gravity w.r.t. its 2-DoF tangent perturbation ``g <- Exp(B d) g``."""

        return -skew(self.gravity) @ gravity_tangent_basis(self.gravity)

    def retract_gravity(self, delta: ArrayLike) -> None:
        basis = gravity_tangent_basis(self.gravity)
        rotated = exp_matrix(basis @ np.asarray(delta, dtype=float)) @ self.gravity
        self.gravity = rotated / np.linalg.norm(rotated) * self.gravity_norm


@dataclass(frozen=True)
class LidarBeamIntrinsics:
    """Correction parameters of one laser beam."""

    elevation: float
    d_elevation: float = 0.0
    d_azimuth: float = 0.0
    vertical: float = 0.0
    horizontal: float = 0.0
    scale: float = 1.0
    range_offset: float = 0.0


@dataclass
class LidarIntrinsics:
    """Per-beam intrinsics stored column-wise; ``elevation`` is the fixed nominal angle."""

    elevation: FloatArray
    d_elevation: FloatArray
    d_azimuth: FloatArray
    vertical: FloatArray
    horizontal: FloatArray
    scale: FloatArray
    range_offset: FloatArray

    def __post_init__(self) -> None:
        for name in ("elevation",) + LIDAR_INTRINSIC_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.scale <= 0.0):
            raise InvalidArgumentError("range scale must be positive")
        if np.any(np.abs(self.d_elevation) >= 0.1) or np.any(np.abs(self.d_azimuth) >= 0.1):
            raise InvalidArgumentError("angle corrections must stay below 0.1 rad")

    @classmethod
    def nominal(cls, elevations: ArrayLike) -> LidarIntrinsics:
        elev = np.asarray(elevations, dtype=float)
        zeros = np.zeros_like(elev)
        return cls(elev, zeros, zeros.copy(), zeros.copy(), zeros.copy(), np.ones_like(elev), zeros.copy())

    @classmethod
    def from_matrix(cls, elevations: ArrayLike, params: ArrayLike) -> LidarIntrinsics:
        values = np.asarray(params, dtype=float).reshape(-1, 6)
        return cls(np.asarray(elevations, dtype=float), *values.T)

    @property
    def num_beams(self) -> int:
        return len(self.elevation)

    def as_matrix(self) -> FloatArray:
        """Parameters as ``(beams, 6)`` in ``LIDAR_INTRINSIC_NAMES`` order."""

        return np.column_stack([getattr(self, name) for name in LIDAR_INTRINSIC_NAMES])

    def copy(self) -> LidarIntrinsics:
        return LidarIntrinsics.from_matrix(self.elevation.copy(), self.as_matrix())

    def beam(self, index: int) -> LidarBeamIntrinsics:
        return LidarBeamIntrinsics(float(self.elevation[index]), *(float(v) for v in self.as_matrix()[index]))


@dataclass
class Extrinsics:
    """IMU-from-LiDAR rotation and translation plus the LiDAR-to-IMU clock offset."""

    rotation: FloatArray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    translation: FloatArray = field(default_factory=lambda: np.zeros(3))
    time_offset: float = 0.0

    def __post_init__(self) -> None:
        self.rotation = quat_normalize(self.rotation)
        self.translation = np.asarray(self.translation, dtype=float)
        self.time_offset = float(self.time_offset)

    def copy(self) -> Extrinsics:
        return Extrinsics(self.rotation.copy(), self.translation.copy(), self.time_offset)

    def rotation_matrix(self) -> FloatArray:
        return quat_to_matrix(self.rotation)

    def transform(self) -> RigidTransform:
        return RigidTransform(self.rotation_matrix(), self.translation.copy())


@dataclass(frozen=True)
class RawLidarPoint:
    beam: int
    time: float
    range: float
    azimuth: float


@dataclass(frozen=True)
class ImuSample:
    time: float
    gyro: FloatArray
    accel: FloatArray


@dataclass
class ImuStream:
    """IMU samples stored column-wise."""

    times: FloatArray
    gyro: FloatArray
    accel: FloatArray

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0.0):
            raise InvalidArgumentError("IMU timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    def sample(self, index: int) -> ImuSample:
        return ImuSample(float(self.times[index]), self.gyro[index].copy(), self.accel[index].copy())

    def select(self, mask: np.ndarray) -> ImuStream:
        return ImuStream(self.times[mask], self.gyro[mask], self.accel[mask])


@dataclass
class LidarScan:
    """One sweep. Raw scans carry beam/range/azimuth; pre-projected scans carry ``points``."""

    start_time: float
    times: FloatArray
    beams: np.ndarray | None = None
    ranges: FloatArray | None = None
    azimuths: FloatArray | None = None
    points: FloatArray | None = None

    @property
    def is_raw(self) -> bool:
        return self.points is None

    def __len__(self) -> int:
        return len(self.times)

    def subset(self, index: np.ndarray) -> LidarScan:
        if self.is_raw:
            return LidarScan(
                self.start_time,
                self.times[index],
                self.beams[index],
                self.ranges[index],
                self.azimuths[index],
            )
        return LidarScan(self.start_time, self.times[index], points=self.points[index])

    def raw_point(self, index: int) -> RawLidarPoint:
        return RawLidarPoint(
            int(self.beams[index]),
            float(self.times[index]),
            float(self.ranges[index]),
            float(self.azimuths[index]),
        )


# -- IMU -----------------------------------------------------------------------------


def predict_gyro(traj: TrajectorySpline, nav: ImuNavState, intr: ImuIntrinsics, t: ArrayLike) -> FloatArray:
    """Gyro reading ``S M R omega + A a + b`` at IMU time ``t``."""

    scalar = np.ndim(t) == 0
    times = np.atleast_1d(np.asarray(t, dtype=float))
    omega = traj.body_angular_velocity(times)
    accel = traj.body_acceleration(times, nav.gravity)
    pred = omega @ intr.gyro_matrix().T + accel @ intr.g_sensitivity.T + nav.gyro_bias
    return pred[0] if scalar else pred


def predict_accel(traj: TrajectorySpline, nav: ImuNavState, intr: ImuIntrinsics, t: ArrayLike) -> FloatArray:
    """Accelerometer reading ``S_a M_a a + b_a`` at IMU time ``t``."""

    scalar = np.ndim(t) == 0
    times = np.atleast_1d(np.asarray(t, dtype=float))
    accel = traj.body_acceleration(times, nav.gravity)
    pred = accel @ intr.accel_matrix().T + nav.accel_bias
    return pred[0] if scalar else pred


def correct_gyro(measured: ArrayLike, nav: ImuNavState, intr: ImuIntrinsics) -> FloatArray:
    """Invert the gyro model (zero g-sensitivity) back to body angular velocity."""

    return np.linalg.solve(intr.gyro_matrix(), (np.asarray(measured, dtype=float) - nav.gyro_bias).T).T


def correct_accel(measured: ArrayLike, nav: ImuNavState, intr: ImuIntrinsics) -> FloatArray:
    return np.linalg.solve(intr.accel_matrix(), (np.asarray(measured, dtype=float) - nav.accel_bias).T).T


@dataclass(slots=True)
class ImuJacobians:
    """Prediction and its Jacobians for a batch of IMU times.

    ``knots`` is ``(n, 4)``; knot Jacobians are ``(n, 3, 12)`` ordered knot-major.
    Missing entries mean the prediction does not depend on that group.
    """

    prediction: FloatArray
    knots: np.ndarray
    rotation_knots: FloatArray
    bias: FloatArray
    scale_misalignment: FloatArray
    position_knots: FloatArray | None = None
    gravity: FloatArray | None = None
    gyro_rotation: FloatArray | None = None


def gyro_jacobians(
    traj: TrajectorySpline, nav: ImuNavState, intr: ImuIntrinsics, t: ArrayLike
) -> ImuJacobians:
    """Gyro prediction with derivatives w.r.t. rotation knots, bias, ``S, M`` and ``R_wI``."""

    times = np.atleast_1d(np.asarray(t, dtype=float))
    n = len(times)
    kin = traj.rotation_kinematics(times, with_jacobians=True)
    gain = intr.gyro_matrix()
    prediction = kin.omega @ gain.T + nav.gyro_bias
    if np.any(intr.g_sensitivity):
        prediction = prediction + traj.body_acceleration(times, nav.gravity) @ intr.g_sensitivity.T
    rotated = kin.omega @ intr.gyro_rotation_matrix().T
    return ImuJacobians(
        prediction=prediction,
        knots=kin.index[:, None] + np.arange(4),
        rotation_knots=np.einsum("ab,nkbc->nakc", gain, kin.omega_jac).reshape(n, 3, 12),
        bias=np.broadcast_to(np.eye(3), (n, 3, 3)),
        scale_misalignment=scale_misalignment_jacobian(intr.gyro_scale, intr.gyro_misalignment, rotated),
        gyro_rotation=-np.einsum("ab,nbc->nac", gain, skew(kin.omega)),
    )


def accel_jacobians(
    traj: TrajectorySpline, nav: ImuNavState, intr: ImuIntrinsics, t: ArrayLike
) -> ImuJacobians:
    """Accelerometer prediction with derivatives w.r.t. both knot sets, gravity, bias and ``S_a, M_a``."""

    times = np.atleast_1d(np.asarray(t, dtype=float))
    n = len(times)
    kin = traj.rotation_kinematics(times, with_jacobians=True)
    world = traj.eval_derivatives(times, 2) - nav.gravity
    body = np.einsum("nba,nb->na", kin.rotation, world)
    gain = intr.accel_matrix()
    _, acc_weights = traj.position_weights(times, 2)
    gain_rt = np.einsum("ab,ncb->nac", gain, kin.rotation)
    return ImuJacobians(
        prediction=body @ gain.T + nav.accel_bias,
        knots=kin.index[:, None] + np.arange(4),
        rotation_knots=np.einsum("nab,nkbc->nakc", gain @ skew(body), kin.orientation_jac).reshape(n, 3, 12),
        bias=np.broadcast_to(np.eye(3), (n, 3, 3)),
        scale_misalignment=scale_misalignment_jacobian(intr.accel_scale, intr.accel_misalignment, body),
        position_knots=(acc_weights[:, None, :, None] * gain_rt[:, :, None, :]).reshape(n, 3, 12),
        gravity=-gain_rt @ nav.gravity_jacobian(),
    )


# -- LiDAR ---------------------------------------------------------------------------


def _beam_arrays(beams: np.ndarray, intr: LidarIntrinsics) -> tuple[FloatArray, ...]:
    return (
        intr.elevation[beams] + intr.d_elevation[beams],
        intr.d_azimuth[beams],
        intr.vertical[beams],
        intr.horizontal[beams],
        intr.scale[beams],
        intr.range_offset[beams],
    )


def project_raw(
    beams: ArrayLike, ranges: ArrayLike, azimuths: ArrayLike, intr: LidarIntrinsics
) -> FloatArray:
    """LiDAR-frame points for raw measurements (vectorized form of the beam model)."""

    points, _, _ = lidar_point_jacobians(beams, ranges, azimuths, intr)
    return points


def lidar_point_jacobians(
    beams: ArrayLike, ranges: ArrayLike, azimuths: ArrayLike, intr: LidarIntrinsics
) -> tuple[FloatArray, FloatArray, FloatArray]:
    """Points ``(n, 3)``, intrinsic Jacobian ``(n, 3, 6)`` and range Jacobian ``(n, 3)``."""

    beam_idx = np.asarray(beams, dtype=int)
    rho = np.asarray(ranges, dtype=float)
    theta = np.asarray(azimuths, dtype=float)
    elev, d_az, vert, horiz, scale, offset = _beam_arrays(beam_idx, intr)
    az = theta + d_az
    rho_bar = scale * rho + offset
    ce, se = np.cos(elev), np.sin(elev)
    ca, sa = np.cos(az), np.sin(az)
    direction = np.column_stack([ce * ca, ce * sa, se])
    points = rho_bar[:, None] * direction + np.column_stack([horiz * sa, horiz * ca, vert])

    jac = np.zeros((len(rho), 3, 6))
    jac[:, :, 0] = rho_bar[:, None] * np.column_stack([-se * ca, -se * sa, ce])
    jac[:, 0, 1] = -rho_bar * ce * sa + horiz * ca
    jac[:, 1, 1] = rho_bar * ce * ca - horiz * sa
    jac[:, 2, 2] = 1.0
    jac[:, 0, 3] = sa
    jac[:, 1, 3] = ca
    jac[:, :, 4] = rho[:, None] * direction
    jac[:, :, 5] = direction
    return points, jac, scale[:, None] * direction


def _single_beam(beam: LidarBeamIntrinsics) -> LidarIntrinsics:
    params = [beam.d_elevation, beam.d_azimuth, beam.vertical, beam.horizontal, beam.scale, beam.range_offset]
    return LidarIntrinsics.from_matrix([beam.elevation], [params])


def lidar_point_from_raw(raw: RawLidarPoint, beam: LidarBeamIntrinsics) -> FloatArray:
    """LiDAR-frame position of a single raw return."""

    intr = _single_beam(beam)
    return project_raw([0], [raw.range], [raw.azimuth], intr)[0]


@dataclass(slots=True)
class LidarProjection:
    """Map-frame points with Jacobians of ``p_M`` for every parameter group.

    Knot Jacobians are ``(n, 4, 3, 3)`` aligned with ``point_knots`` /
    ``anchor_knots``; rotation knots use right perturbations.
    """

    map_points: FloatArray
    map_from_lidar: FloatArray
    point_knots: np.ndarray
    anchor_knots: np.ndarray
    point_rot_jac: FloatArray | None = None
    point_pos_jac: FloatArray | None = None
    anchor_rot_jac: FloatArray | None = None
    anchor_pos_jac: FloatArray | None = None
    ext_rot_jac: FloatArray | None = None
    ext_trans_jac: FloatArray | None = None
    time_offset_jac: FloatArray | None = None


def lidar_pose_at(traj: TrajectorySpline, ext: Extrinsics, tau: float, tau0: float) -> RigidTransform:
    """Map-from-LiDAR pose at LiDAR time ``tau``; the map is the LiDAR frame at ``tau0``."""

    t_anchor = tau0 + ext.time_offset
    t_point = tau + ext.time_offset
    anchor = RigidTransform(traj.eval_rotation_matrix(t_anchor), traj.eval_position(t_anchor))
    current = RigidTransform(traj.eval_rotation_matrix(t_point), traj.eval_position(t_point))
    lidar = ext.transform()
    return anchor.compose(lidar).inverse().compose(current).compose(lidar)


def lidar_map_projection(
    traj: TrajectorySpline,
    ext: Extrinsics,
    lidar_points: FloatArray,
    times: FloatArray,
    anchor_time: float,
    with_jacobians: bool = False,
) -> LidarProjection:
    """Transform LiDAR-frame points stamped on the LiDAR clock into the map frame."""

    t_point = np.asarray(times, dtype=float) + ext.time_offset
    t_anchor = np.array([anchor_time + ext.time_offset])
    rot_b = traj.rotation_kinematics(t_point, with_jacobians)
    rot_a = traj.rotation_kinematics(t_anchor, with_jacobians)
    pb = traj.eval_position(t_point)
    pa = traj.eval_position(t_anchor)[0]
    rb = rot_b.rotation
    ra = rot_a.rotation[0]
    re = ext.rotation_matrix()
    pe = ext.translation

    w = lidar_points @ re.T + pe
    x_world = np.einsum("nab,nb->na", rb, w) + pb
    in_anchor = (x_world - pa) @ ra
    map_points = (in_anchor - pe) @ re
    rel = re.T @ ra.T
    map_from_lidar = rel @ rb @ re
    projection = LidarProjection(
        map_points=map_points,
        map_from_lidar=map_from_lidar,
        point_knots=rot_b.index[:, None] + np.arange(4),
        anchor_knots=rot_a.index[0] + np.arange(4),
    )
    if not with_jacobians:
        return projection

    n = len(t_point)
    rel_b = rel @ rb
    j_rot_b = -rel_b @ skew(w)
    j_pos_b = np.broadcast_to(rel, (n, 3, 3))
    j_rot_a = re.T @ skew(in_anchor)
    j_pos_a = np.broadcast_to(-rel, (n, 3, 3))

    _, weights_b = traj.position_weights(t_point)
    _, weights_a = traj.position_weights(t_anchor)
    projection.point_rot_jac = np.einsum("nab,nkbc->nkac", j_rot_b, rot_b.orientation_jac)
    projection.point_pos_jac = weights_b[:, :, None, None] * j_pos_b[:, None]
    projection.anchor_rot_jac = np.einsum("nab,kbc->nkac", j_rot_a, rot_a.orientation_jac[0])
    projection.anchor_pos_jac = weights_a[0][None, :, None, None] * j_pos_a[:, None]

    projection.ext_rot_jac = skew(map_points) - map_from_lidar @ skew(lidar_points)
    projection.ext_trans_jac = re.T @ (ra.T @ rb) - re.T

    vel_b = traj.eval_derivatives(t_point, 1)
    vel_a = traj.eval_derivatives(t_anchor, 1)[0]
    projection.time_offset_jac = (
        np.einsum("nab,nb->na", j_rot_b, rot_b.omega)
        + np.einsum("nab,nb->na", j_pos_b, vel_b)
        + np.einsum("nab,b->na", j_rot_a, rot_a.omega[0])
        + np.einsum("nab,b->na", j_pos_a, vel_a)
    )
    return projection


def range_variance(
    normals: FloatArray,
    map_from_lidar: FloatArray,
    range_jac: FloatArray,
    sigma_range: float,
    incidence_floor: float,
) -> FloatArray:
    """First-order variance of the point-to-plane distance from range noise."""

    along = np.einsum("na,nab,nb->n", normals, map_from_lidar, range_jac)
    return np.maximum(along**2, incidence_floor**2) * sigma_range**2


def point_to_plane_residual(
    traj: TrajectorySpline,
    ext: Extrinsics,
    beam: LidarBeamIntrinsics,
    raw: RawLidarPoint,
    normal: ArrayLike,
    offset: float,
    anchor_time: float,
    sigma_range: float = 0.01,
    incidence_floor: float = 0.1,
) -> tuple[float, float]:
    """Signed distance ``n^T p_M + d`` of one raw point and its inverse variance."""

    intr = _single_beam(beam)
    points, _, range_jac = lidar_point_jacobians([0], [raw.range], [raw.azimuth], intr)
    projection = lidar_map_projection(traj, ext, points, np.array([raw.time]), anchor_time)
    n = np.asarray(normal, dtype=float)[None, :]
    residual = float(n[0] @ projection.map_points[0] + offset)
    variance = range_variance(n, projection.map_from_lidar, range_jac, sigma_range, incidence_floor)
    return residual, float(1.0 / variance[0])
