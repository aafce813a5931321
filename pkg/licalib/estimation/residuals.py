"""Batched residual blocks for gyro, accelerometer and point-to-plane terms.

Every residual is ``prediction - measurement``; Jacobians are those of the
prediction with respect to the error state of :mod:`licalib.estimation.state`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from licalib.errors import NonFiniteResidualError
from licalib.estimation.state import ActiveBlocks, CalibState, StateLayout
from licalib.geometry import FloatArray
from licalib.sensors import (
    Extrinsics,
    ImuIntrinsics,
    ImuNavState,
    ImuStream,
    LidarIntrinsics,
    accel_jacobians,
    gyro_jacobians,
    lidar_map_projection,
    lidar_point_jacobians,
    predict_accel,
    predict_gyro,
    range_variance,
)
from licalib.spline import TrajectorySpline

logger = logging.getLogger(__name__)

LIDAR_CHUNK = 20000


@dataclass(slots=True)
class ResidualBlock:
    """A batch of scalar residual rows sharing one Jacobian width."""

    kind: str
    residuals: FloatArray
    weights: FloatArray
    times: FloatArray
    jac_values: FloatArray | None = None
    jac_cols: np.ndarray | None = None
    robust: bool = False

    def __len__(self) -> int:
        return len(self.residuals)

    def check_finite(self) -> None:
        bad = ~np.isfinite(self.residuals)
        if self.jac_values is not None:
            bad |= ~np.all(np.isfinite(self.jac_values), axis=1)
        if np.any(bad):
            raise NonFiniteResidualError(self.kind, int(np.flatnonzero(bad)[0]))

    def subset(self, rows: np.ndarray) -> ResidualBlock:
        return ResidualBlock(
            self.kind,
            self.residuals[rows],
            self.weights[rows],
            self.times[rows],
            None if self.jac_values is None else self.jac_values[rows],
            None if self.jac_cols is None else self.jac_cols[rows],
            self.robust,
        )


@dataclass(slots=True)
class ImuSigmas:
    """Discrete-time white-noise standard deviations of one IMU sample."""

    gyro: float
    accel: float

    @classmethod
    def from_densities(cls, gyro_density: float, accel_density: float, rate_hz: float) -> ImuSigmas:
        root = float(np.sqrt(rate_hz))
        return cls(gyro_density * root, accel_density * root)


@dataclass(slots=True)
class AssociatedPoints:
    """LiDAR returns paired with fixed map planes for one optimization pass."""

    times: FloatArray
    normals: FloatArray
    offsets: FloatArray
    plane_ids: np.ndarray
    beams: np.ndarray | None = None
    ranges: FloatArray | None = None
    azimuths: FloatArray | None = None
    points: FloatArray | None = None

    def __len__(self) -> int:
        return len(self.times)

    @property
    def is_raw(self) -> bool:
        return self.points is None

    def select(self, rows: np.ndarray | slice) -> AssociatedPoints:
        def pick(values: np.ndarray | None) -> np.ndarray | None:
            return None if values is None else values[rows]

        return AssociatedPoints(
            self.times[rows],
            self.normals[rows],
            self.offsets[rows],
            self.plane_ids[rows],
            pick(self.beams),
            pick(self.ranges),
            pick(self.azimuths),
            pick(self.points),
        )

    @classmethod
    def concatenate(cls, parts: list[AssociatedPoints]) -> AssociatedPoints:
        def join(name: str) -> np.ndarray | None:
            values = [getattr(part, name) for part in parts]
            return None if values[0] is None else np.concatenate(values)

        return cls(*(join(item.name) for item in fields(cls)))


@dataclass(slots=True)
class LidarNoise:
    sigma_range: float = 0.01
    incidence_floor: float = 0.1


def huber_weights(residuals: FloatArray, delta: float) -> FloatArray:
    magnitude = np.abs(residuals)
    return np.where(magnitude <= delta, 1.0, delta / np.maximum(magnitude, 1e-300))


def block_cost(block: ResidualBlock, huber_delta: float | None = None) -> float:
    """Half the (robustified) energy norm of a block."""

    r = block.residuals
    if block.robust and huber_delta is not None:
        magnitude = np.abs(r)
        rho = np.where(magnitude <= huber_delta, 0.5 * r * r, huber_delta * magnitude - 0.5 * huber_delta**2)
        return float(np.sum(block.weights * rho))
    return float(0.5 * np.sum(block.weights * r * r))


def _rows(values: FloatArray, col_row: np.ndarray) -> tuple[FloatArray, np.ndarray]:
    """Flatten ``(n, 3, w)`` per-sample blocks to ``(3n, w)`` rows sharing per-sample columns."""

    n, dim, width = values.shape
    cols = np.broadcast_to(col_row[:, None, :], (n, dim, width))
    return values.reshape(n * dim, width), np.ascontiguousarray(cols).reshape(n * dim, width)


def _imu_block(
    kind: str, prediction: FloatArray, measured: FloatArray, times: FloatArray, sigma: float
) -> ResidualBlock:
    residual = (prediction - measured).ravel()
    weights = np.full(len(residual), 1.0 / sigma**2)
    return ResidualBlock(kind, residual, weights, np.repeat(times, 3))


def gyro_block(
    traj: TrajectorySpline,
    nav: ImuNavState,
    intr: ImuIntrinsics,
    imu: ImuStream,
    sigma: float,
    layout: StateLayout | None = None,
    segment: int = 0,
) -> ResidualBlock:
    """Gyro residuals; Jacobian columns are filled when ``layout`` is given."""

    if layout is None:
        return _imu_block("gyro", predict_gyro(traj, nav, intr, imu.times), imu.gyro, imu.times, sigma)
    jac = gyro_jacobians(traj, nav, intr, imu.times)
    block = _imu_block("gyro", jac.prediction, imu.gyro, imu.times, sigma)
    n = len(imu)
    cols = layout.segments[segment]
    values = np.concatenate([jac.rotation_knots, jac.bias, jac.scale_misalignment, jac.gyro_rotation], axis=2)
    col_row = np.concatenate(
        [
            cols.rotations[jac.knots].reshape(n, 12),
            np.broadcast_to(cols.gyro_bias, (n, 3)),
            np.broadcast_to(layout.imu[0:6], (n, 6)),
            np.broadcast_to(layout.imu[12:15], (n, 3)),
        ],
        axis=1,
    )
    block.jac_values, block.jac_cols = _rows(values, col_row)
    return block


def accel_block(
    traj: TrajectorySpline,
    nav: ImuNavState,
    intr: ImuIntrinsics,
    imu: ImuStream,
    sigma: float,
    layout: StateLayout | None = None,
    segment: int = 0,
) -> ResidualBlock:
    """Accelerometer residuals; Jacobian columns are filled when ``layout`` is given."""

    if layout is None:
        return _imu_block("accel", predict_accel(traj, nav, intr, imu.times), imu.accel, imu.times, sigma)
    jac = accel_jacobians(traj, nav, intr, imu.times)
    block = _imu_block("accel", jac.prediction, imu.accel, imu.times, sigma)
    n = len(imu)
    cols = layout.segments[segment]
    values = np.concatenate(
        [jac.position_knots, jac.rotation_knots, jac.gravity, jac.bias, jac.scale_misalignment], axis=2
    )
    col_row = np.concatenate(
        [
            cols.positions[jac.knots].reshape(n, 12),
            cols.rotations[jac.knots].reshape(n, 12),
            np.broadcast_to(cols.gravity, (n, 2)),
            np.broadcast_to(cols.accel_bias, (n, 3)),
            np.broadcast_to(layout.imu[6:12], (n, 6)),
        ],
        axis=1,
    )
    block.jac_values, block.jac_cols = _rows(values, col_row)
    return block


def imu_blocks(
    state: CalibState,
    imu: ImuStream,
    sigmas: ImuSigmas,
    layout: StateLayout | None = None,
    segment: int = 0,
) -> tuple[list[ResidualBlock], int]:
    """Gyro and accel blocks of one segment plus the count of samples outside the spline domain."""

    seg = state.segments[segment]
    inside = seg.trajectory.contains(imu.times)
    skipped = int(np.count_nonzero(~inside))
    if skipped:
        logger.debug("skipping %d IMU samples outside the trajectory domain", skipped)
    samples = imu.select(inside)
    if len(samples) == 0:
        return [], skipped
    blocks = [
        gyro_block(seg.trajectory, seg.nav, state.imu, samples, sigmas.gyro, layout, segment),
        accel_block(seg.trajectory, seg.nav, state.imu, samples, sigmas.accel, layout, segment),
    ]
    return blocks, skipped


@dataclass(slots=True)
class ImuCost:
    cost: float
    blocks: list[ResidualBlock]
    skipped: int


def imu_cost(
    samples: ImuStream,
    traj: TrajectorySpline,
    nav: ImuNavState,
    intr: ImuIntrinsics,
    sigmas: ImuSigmas,
) -> ImuCost:
    """Total IMU cost ``sum 0.5 |pred - meas|^2_Sigma`` with its residual blocks."""

    state = CalibState.single(traj, nav, intr, LidarIntrinsics.nominal(np.zeros(0)), Extrinsics())
    layout = StateLayout.build(state, ActiveBlocks(imu_intrinsics=True))
    blocks, skipped = imu_blocks(state, samples, sigmas, layout)
    return ImuCost(sum(block_cost(block) for block in blocks), blocks, skipped)


def _lidar_chunk(
    state: CalibState,
    points: AssociatedPoints,
    anchor_time: float,
    noise: LidarNoise,
    layout: StateLayout | None,
    segment: int,
) -> ResidualBlock:
    seg = state.segments[segment]
    ext = state.extrinsics_for(segment)
    if points.is_raw:
        lidar_points, intr_jac, range_jac = lidar_point_jacobians(
            points.beams, points.ranges, points.azimuths, state.lidar
        )
    else:
        lidar_points = points.points
        intr_jac = None
        range_jac = lidar_points / np.maximum(np.linalg.norm(lidar_points, axis=1, keepdims=True), 1e-12)
    with_jac = layout is not None
    proj = lidar_map_projection(seg.trajectory, ext, lidar_points, points.times, anchor_time, with_jac)
    normals = points.normals
    residual = np.einsum("na,na->n", normals, proj.map_points) + points.offsets
    variance = range_variance(
        normals, proj.map_from_lidar, range_jac, noise.sigma_range, noise.incidence_floor
    )
    block = ResidualBlock("lidar", residual, 1.0 / variance, points.times.copy(), robust=True)
    if not with_jac:
        return block

    n = len(points)
    cols = layout.segments[segment]

    def project(jac: FloatArray) -> FloatArray:
        return np.einsum("na,nkab->nkb", normals, jac).reshape(n, 12)

    anchor_pos_cols = np.broadcast_to(cols.positions[proj.anchor_knots].reshape(12), (n, 12))
    anchor_rot_cols = np.broadcast_to(cols.rotations[proj.anchor_knots].reshape(12), (n, 12))
    pieces = [
        project(proj.point_pos_jac),
        project(proj.point_rot_jac),
        project(proj.anchor_pos_jac),
        project(proj.anchor_rot_jac),
        np.einsum("na,nab->nb", normals, proj.ext_rot_jac),
        np.einsum("na,nab->nb", normals, proj.ext_trans_jac),
        np.einsum("na,na->n", normals, proj.time_offset_jac)[:, None],
    ]
    col_pieces = [
        cols.positions[proj.point_knots].reshape(n, 12),
        cols.rotations[proj.point_knots].reshape(n, 12),
        anchor_pos_cols,
        anchor_rot_cols,
        np.broadcast_to(layout.extrinsic_rotation, (n, 3)),
        np.broadcast_to(layout.extrinsic_translation, (n, 3)),
        np.full((n, 1), cols.time_offset),
    ]
    if intr_jac is not None:
        pieces.append(np.einsum("na,nab,nbk->nk", normals, proj.map_from_lidar, intr_jac))
        col_pieces.append(layout.lidar[points.beams])
    block.jac_values = np.concatenate(pieces, axis=1)
    block.jac_cols = np.concatenate(col_pieces, axis=1)
    return block


def lidar_block(
    state: CalibState,
    points: AssociatedPoints,
    anchor_time: float,
    noise: LidarNoise,
    layout: StateLayout | None = None,
    segment: int = 0,
) -> ResidualBlock:
    """Point-to-plane residuals ``n^T p_M + d`` weighted by propagated range noise."""

    chunks = []
    for start in range(0, len(points), LIDAR_CHUNK):
        chunk = points.select(slice(start, start + LIDAR_CHUNK))
        chunks.append(_lidar_chunk(state, chunk, anchor_time, noise, layout, segment))
    with_jac = layout is not None
    if not chunks:
        empty = np.zeros(0)
        block = ResidualBlock("lidar", empty, empty.copy(), empty.copy(), robust=True)
        if with_jac:
            block.jac_values = np.zeros((0, 1))
            block.jac_cols = np.full((0, 1), -1, dtype=int)
        return block
    return ResidualBlock(
        "lidar",
        np.concatenate([c.residuals for c in chunks]),
        np.concatenate([c.weights for c in chunks]),
        np.concatenate([c.times for c in chunks]),
        np.concatenate([c.jac_values for c in chunks]) if with_jac else None,
        np.concatenate([c.jac_cols for c in chunks]) if with_jac else None,
        robust=True,
    )
