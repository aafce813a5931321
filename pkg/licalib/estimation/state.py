"""Calibration state, error-state layout and manifold updates.

Error-state column order::

    [seg0 p-knots, seg0 q-knots, seg1 p-knots, ...,
     nav0 (gravity 2, gyro bias 3, accel bias 3), nav1, ...,
     IMU intrinsics 15, LiDAR intrinsics 6 per beam,
     extrinsic rotation 3, extrinsic translation 3,
     time offset per segment]

Fixed slots map to column ``-1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from licalib.geometry import FloatArray, quat_normalize
from licalib.sensors import (
    IMU_INTRINSIC_NAMES,
    LIDAR_INTRINSIC_NAMES,
    Extrinsics,
    ImuIntrinsics,
    ImuNavState,
    LidarIntrinsics,
)
from licalib.spline import TrajectorySpline

# first beam keeps only range scale and range offset free
FIRST_BEAM_FREE = np.array([False, False, False, False, True, True])


def _right_update(quat: FloatArray, delta: FloatArray) -> FloatArray:
    return quat_normalize((Rotation.from_quat(quat) * Rotation.from_rotvec(delta)).as_quat())


@dataclass
class SegmentState:
    """Per-segment trajectory, navigation state and clock offset."""

    trajectory: TrajectorySpline
    nav: ImuNavState
    time_offset: float = 0.0

    def copy(self) -> SegmentState:
        return SegmentState(self.trajectory.copy(), self.nav.copy(), self.time_offset)


@dataclass
class CalibState:
    """Full estimation state; spatial extrinsics and intrinsics are shared by all segments."""

    segments: list[SegmentState]
    imu: ImuIntrinsics
    lidar: LidarIntrinsics
    extrinsic_rotation: FloatArray
    extrinsic_translation: FloatArray

    @classmethod
    def single(
        cls,
        trajectory: TrajectorySpline,
        nav: ImuNavState,
        imu: ImuIntrinsics,
        lidar: LidarIntrinsics,
        extrinsics: Extrinsics,
    ) -> CalibState:
        return cls(
            [SegmentState(trajectory, nav, extrinsics.time_offset)],
            imu,
            lidar,
            extrinsics.rotation.copy(),
            extrinsics.translation.copy(),
        )

    @property
    def trajectory(self) -> TrajectorySpline:
        return self.segments[0].trajectory

    @property
    def nav(self) -> ImuNavState:
        return self.segments[0].nav

    @property
    def extrinsics(self) -> Extrinsics:
        return self.extrinsics_for(0)

    def extrinsics_for(self, segment: int) -> Extrinsics:
        offset = self.segments[segment].time_offset
        return Extrinsics(self.extrinsic_rotation, self.extrinsic_translation, offset)

    def copy(self) -> CalibState:
        return CalibState(
            [segment.copy() for segment in self.segments],
            self.imu.copy(),
            self.lidar.copy(),
            self.extrinsic_rotation.copy(),
            self.extrinsic_translation.copy(),
        )


@dataclass(frozen=True)
class ActiveBlocks:
    """Which parameter groups are optimized in the current pass."""

    positions: bool = True
    rotations: bool = True
    gravity: bool = True
    gyro_bias: bool = True
    accel_bias: bool = True
    imu_intrinsics: bool = False
    lidar_intrinsics: bool = False
    extrinsic_rotation: bool = True
    extrinsic_translation: bool = True
    time_offset: bool = True

    def with_intrinsics(self, enabled: bool = True) -> ActiveBlocks:
        return replace(self, imu_intrinsics=enabled, lidar_intrinsics=enabled)

    @classmethod
    def rotations_only(cls) -> ActiveBlocks:
        return cls(
            positions=False,
            gravity=False,
            gyro_bias=False,
            accel_bias=False,
            extrinsic_rotation=False,
            extrinsic_translation=False,
            time_offset=False,
        )

    def names(self) -> list[str]:
        return [name for name, value in self.__dict__.items() if value]


@dataclass
class SegmentColumns:
    positions: np.ndarray
    rotations: np.ndarray
    gravity: np.ndarray
    gyro_bias: np.ndarray
    accel_bias: np.ndarray
    time_offset: int


@dataclass
class StateLayout:
    """Column assignment of every error-state component."""

    segments: list[SegmentColumns]
    imu: np.ndarray
    lidar: np.ndarray
    extrinsic_rotation: np.ndarray
    extrinsic_translation: np.ndarray
    size: int
    labels: list[str] = field(default_factory=list)

    @classmethod
    def build(cls, state: CalibState, active: ActiveBlocks) -> StateLayout:
        labels: list[str] = []

        def take(count: int, enabled: bool, label: str) -> np.ndarray:
            if not enabled:
                return np.full(count, -1, dtype=int)
            start = len(labels)
            labels.extend(f"{label}[{k}]" for k in range(count))
            return np.arange(start, start + count)

        positions, rotations = [], []
        for s, segment in enumerate(state.segments):
            # knot 0 is the gauge anchor for both splines
            n = segment.trajectory.num_knots
            gauge = np.full((1, 3), -1, dtype=int)
            pos = take(3 * (n - 1), active.positions, f"seg{s}.p").reshape(n - 1, 3)
            positions.append(np.vstack([gauge, pos]))
            rot = take(3 * (n - 1), active.rotations, f"seg{s}.q").reshape(n - 1, 3)
            rotations.append(np.vstack([gauge, rot]))
        navs = []
        for s in range(len(state.segments)):
            navs.append(
                (
                    take(2, active.gravity, f"seg{s}.gravity"),
                    take(3, active.gyro_bias, f"seg{s}.gyro_bias"),
                    take(3, active.accel_bias, f"seg{s}.accel_bias"),
                )
            )
        imu = take(15, active.imu_intrinsics, "imu")
        if active.imu_intrinsics:
            for k, name in enumerate(IMU_INTRINSIC_NAMES):
                labels[imu[k]] = f"imu.{name}"
        beams = state.lidar.num_beams
        lidar = np.full((beams, 6), -1, dtype=int)
        if active.lidar_intrinsics:
            for beam in range(beams):
                free = FIRST_BEAM_FREE if beam == 0 else np.ones(6, dtype=bool)
                for k in np.flatnonzero(free):
                    lidar[beam, k] = len(labels)
                    labels.append(f"lidar[{beam}].{LIDAR_INTRINSIC_NAMES[k]}")
        ext_rot = take(3, active.extrinsic_rotation, "ext.rotation")
        ext_trans = take(3, active.extrinsic_translation, "ext.translation")
        columns = []
        for s, (grav, gbias, abias) in enumerate(navs):
            offset = int(take(1, active.time_offset, f"seg{s}.time_offset")[0])
            columns.append(SegmentColumns(positions[s], rotations[s], grav, gbias, abias, offset))
        return cls(columns, imu, lidar, ext_rot, ext_trans, len(labels), labels)

    @property
    def extrinsic_columns(self) -> np.ndarray:
        """Active extrinsic columns, rotation first then translation."""

        cols = np.concatenate([self.extrinsic_rotation, self.extrinsic_translation])
        return cols[cols >= 0]


def _gather(delta: FloatArray, cols: np.ndarray) -> FloatArray:
    cols = np.asarray(cols)
    if delta.size == 0:
        return np.zeros(cols.shape)
    return np.where(cols >= 0, delta[np.clip(cols, 0, None)], 0.0)


def apply_update(
    state: CalibState, layout: StateLayout, delta: FloatArray, time_offset_bound: float = np.inf
) -> CalibState:
    """Return ``state [+] delta``; the input state is left untouched."""

    updated = state.copy()
    for segment, cols in zip(updated.segments, layout.segments, strict=True):
        segment.trajectory.retract(_gather(delta, cols.positions), _gather(delta, cols.rotations))
        segment.nav.retract_gravity(_gather(delta, cols.gravity))
        segment.nav.gyro_bias = segment.nav.gyro_bias + _gather(delta, cols.gyro_bias)
        segment.nav.accel_bias = segment.nav.accel_bias + _gather(delta, cols.accel_bias)
        if cols.time_offset >= 0:
            shifted = segment.time_offset + float(delta[cols.time_offset])
            segment.time_offset = float(np.clip(shifted, -time_offset_bound, time_offset_bound))

    imu_delta = _gather(delta, layout.imu)
    imu = updated.imu
    imu.gyro_scale = imu.gyro_scale + imu_delta[0:3]
    imu.gyro_misalignment = imu.gyro_misalignment + imu_delta[3:6]
    imu.accel_scale = imu.accel_scale + imu_delta[6:9]
    imu.accel_misalignment = imu.accel_misalignment + imu_delta[9:12]
    imu.gyro_rotation = _right_update(imu.gyro_rotation, imu_delta[12:15])

    lidar_params = updated.lidar.as_matrix() + _gather(delta, layout.lidar)
    updated.lidar = LidarIntrinsics.from_matrix(updated.lidar.elevation, lidar_params)

    rot_delta = _gather(delta, layout.extrinsic_rotation)
    updated.extrinsic_rotation = _right_update(updated.extrinsic_rotation, rot_delta)
    trans_delta = _gather(delta, layout.extrinsic_translation)
    updated.extrinsic_translation = updated.extrinsic_translation + trans_delta
    return updated
