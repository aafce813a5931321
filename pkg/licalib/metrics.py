"""Map sharpness and calibration accuracy metrics."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike
from scipy.spatial import cKDTree

from licalib.errors import InsufficientDataError, InvalidArgumentError
from licalib.geometry import FloatArray, matrix_to_euler, quat_to_matrix
from licalib.schemas import (
    AcceptanceVerdict,
    CalibrationReport,
    ExtrinsicErrors,
    ImuIntrinsicErrors,
    LidarIntrinsicErrors,
)
from licalib.sensors import Extrinsics, ImuIntrinsics, LidarIntrinsics

logger = logging.getLogger(__name__)

_ENTROPY_CONSTANT = 2.0 * np.pi * np.e


@dataclass(slots=True)
class MapEntropy:
    value: float
    evaluated: int
    skipped: int


def mean_map_entropy(
    points: ArrayLike,
    radius: float = 0.3,
    min_neighbors: int = 5,
    max_points: int | None = None,
) -> MapEntropy:
    """Mean of ``0.5 ln |2 pi e Sigma|`` over points with enough neighbours within ``radius``.

    When ``max_points`` is set, entropies are evaluated on evenly spaced query
    points while neighbourhoods still use the full cloud.
    """

    cloud = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(cloud) == 0:
        raise InsufficientDataError("map entropy needs a non-empty map")
    tree = cKDTree(cloud)
    queries = np.arange(len(cloud))
    if max_points is not None and len(cloud) > max_points:
        queries = np.unique(np.linspace(0, len(cloud) - 1, max_points).astype(int))
    neighborhoods = tree.query_ball_point(cloud[queries], radius)
    entropies = []
    skipped = 0
    for members in neighborhoods:
        if len(members) < min_neighbors:
            skipped += 1
            continue
        local = cloud[members]
        centered = local - local.mean(axis=0)
        covariance = centered.T @ centered / len(local)
        sign, logdet = np.linalg.slogdet(_ENTROPY_CONSTANT * covariance)
        if sign <= 0:
            skipped += 1
            continue
        entropies.append(0.5 * logdet)
    if not entropies:
        raise InsufficientDataError(f"no point has {min_neighbors} neighbours within {radius} m")
    if skipped:
        logger.debug("map entropy skipped %d of %d points", skipped, len(queries))
    return MapEntropy(float(np.mean(entropies)), len(entropies), skipped)


def extrinsic_rmse(estimates: Sequence[Extrinsics], truth: Extrinsics) -> tuple[float, float]:
    """Per-axis RMS of the mean estimate's error: translation in cm, rotation (Euler) in degrees."""

    if not estimates:
        raise InvalidArgumentError("extrinsic_rmse needs at least one estimate")
    translation = np.mean([est.translation for est in estimates], axis=0)
    euler = np.mean([rotation_error_deg(est.rotation, truth.rotation) for est in estimates], axis=0)
    pos_error = (translation - truth.translation) * 100.0
    return float(np.sqrt(np.mean(pos_error**2))), float(np.sqrt(np.mean(euler**2)))


def rotation_error_deg(estimate: ArrayLike, truth: ArrayLike) -> FloatArray:
    """Roll/pitch/yaw of ``R_truth^T R_estimate`` in degrees."""

    delta = quat_to_matrix(truth).T @ quat_to_matrix(estimate)
    return np.degrees(matrix_to_euler(delta))


def direction_agreement(detected: ArrayLike, truth: ArrayLike) -> float:
    """Sign-invariant cosine ``|a . b|`` of two directions."""

    a = np.asarray(detected, dtype=float)
    b = np.asarray(truth, dtype=float)
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        raise InvalidArgumentError("direction_agreement needs non-zero vectors")
    return float(abs(a @ b) / (norm_a * norm_b))


def _imu_errors(estimate: ImuIntrinsics, truth: ImuIntrinsics) -> ImuIntrinsicErrors:
    return ImuIntrinsicErrors(
        gyro_scale=(estimate.gyro_scale - truth.gyro_scale).tolist(),
        gyro_misalignment=(estimate.gyro_misalignment - truth.gyro_misalignment).tolist(),
        accel_scale=(estimate.accel_scale - truth.accel_scale).tolist(),
        accel_misalignment=(estimate.accel_misalignment - truth.accel_misalignment).tolist(),
        gyro_rotation_deg=rotation_error_deg(estimate.gyro_rotation, truth.gyro_rotation).tolist(),
    )


def _lidar_errors(estimate: LidarIntrinsics, truth: LidarIntrinsics) -> LidarIntrinsicErrors:
    diff = np.abs(estimate.as_matrix() - truth.as_matrix())
    # first beam keeps its angles and offsets fixed, so only its range terms count
    angular = diff[1:] if len(diff) > 1 else diff
    return LidarIntrinsicErrors(
        d_elevation_deg=float(np.degrees(angular[:, 0].mean())),
        d_azimuth_deg=float(np.degrees(angular[:, 1].mean())),
        vertical_mm=float(angular[:, 2].mean() * 1000.0),
        horizontal_mm=float(angular[:, 3].mean() * 1000.0),
        scale_percent=float(diff[:, 4].mean() * 100.0),
        range_offset_mm=float(diff[:, 5].mean() * 1000.0),
    )


def calibration_report(
    extrinsics: Extrinsics,
    truth_extrinsics: Extrinsics,
    imu: ImuIntrinsics | None = None,
    truth_imu: ImuIntrinsics | None = None,
    lidar: LidarIntrinsics | None = None,
    truth_lidar: LidarIntrinsics | None = None,
    time_offsets: Sequence[float] = (),
) -> CalibrationReport:
    """Compare one estimate against ground truth in report units (cm, degrees, ms)."""

    pos_rmse, rot_rmse = extrinsic_rmse([extrinsics], truth_extrinsics)
    offsets = list(time_offsets) or [extrinsics.time_offset]
    errors = ExtrinsicErrors(
        translation_cm=((extrinsics.translation - truth_extrinsics.translation) * 100.0).tolist(),
        rotation_deg=rotation_error_deg(extrinsics.rotation, truth_extrinsics.rotation).tolist(),
        time_offset_ms=[(offset - truth_extrinsics.time_offset) * 1000.0 for offset in offsets],
        translation_rmse_cm=pos_rmse,
        rotation_rmse_deg=rot_rmse,
    )
    report = CalibrationReport(extrinsics=errors)
    if imu is not None and truth_imu is not None:
        report.imu = _imu_errors(imu, truth_imu)
    if lidar is not None and truth_lidar is not None:
        report.lidar = _lidar_errors(lidar, truth_lidar)
    return report


@dataclass(frozen=True, slots=True)
class IntrinsicLimits:
    """Absolute error bounds for IMU and LiDAR intrinsics; LiDAR bounds apply to per-type means."""

    imu_scale: float = 0.005
    imu_misalignment: float = 0.005
    gyro_rotation_deg: float = 0.1
    lidar_angle_deg: float = 0.02
    lidar_offset_mm: float = 2.0
    lidar_scale_percent: float = 0.02


def _imu_failures(errors: ImuIntrinsicErrors, limits: IntrinsicLimits) -> list[str]:
    failures = []
    groups = (
        ("gyro_scale", errors.gyro_scale, limits.imu_scale, ""),
        ("accel_scale", errors.accel_scale, limits.imu_scale, ""),
        ("gyro_misalignment", errors.gyro_misalignment, limits.imu_misalignment, ""),
        ("accel_misalignment", errors.accel_misalignment, limits.imu_misalignment, ""),
        ("gyro_rotation", errors.gyro_rotation_deg, limits.gyro_rotation_deg, " deg"),
    )
    for name, values, bound, unit in groups:
        for axis, value in enumerate(values):
            if abs(value) > bound:
                failures.append(f"{name}[{axis}] error {value:.5f}{unit} > {bound}{unit}")
    return failures


def _lidar_failures(errors: LidarIntrinsicErrors, limits: IntrinsicLimits) -> list[str]:
    checks = (
        ("d_elevation", errors.d_elevation_deg, limits.lidar_angle_deg, "deg"),
        ("d_azimuth", errors.d_azimuth_deg, limits.lidar_angle_deg, "deg"),
        ("vertical", errors.vertical_mm, limits.lidar_offset_mm, "mm"),
        ("horizontal", errors.horizontal_mm, limits.lidar_offset_mm, "mm"),
        ("range_offset", errors.range_offset_mm, limits.lidar_offset_mm, "mm"),
        ("range_scale", errors.scale_percent, limits.lidar_scale_percent, "%"),
    )
    return [
        f"lidar {name} mean error {value:.4f} {unit} > {bound} {unit}"
        for name, value, bound, unit in checks
        if value > bound
    ]


def acceptance_verdict(
    report: CalibrationReport,
    max_translation_cm: float,
    max_rotation_deg: float,
    max_time_offset_ms: float,
    skip_axes: Sequence[int] = (),
    intrinsic_limits: IntrinsicLimits | None = None,
) -> AcceptanceVerdict:
    """Check per-axis extrinsic and time-offset errors against thresholds.

    ``skip_axes`` lists translation axes that are unobservable for the run and
    therefore not judged. With ``intrinsic_limits`` the IMU and LiDAR intrinsic
    errors present in the report are judged as well.
    """

    failures: list[str] = []
    errors = report.extrinsics
    for axis, value in enumerate(errors.translation_cm):
        if axis not in skip_axes and abs(value) > max_translation_cm:
            failures.append(f"translation[{'xyz'[axis]}] error {value:.3f} cm > {max_translation_cm} cm")
    for axis, value in enumerate(errors.rotation_deg):
        if abs(value) > max_rotation_deg:
            failures.append(f"rotation[{'xyz'[axis]}] error {value:.3f} deg > {max_rotation_deg} deg")
    for segment, value in enumerate(errors.time_offset_ms):
        if abs(value) > max_time_offset_ms:
            failures.append(f"time_offset[{segment}] error {value:.3f} ms > {max_time_offset_ms} ms")
    if intrinsic_limits is not None:
        if report.imu is not None:
            failures.extend(_imu_failures(report.imu, intrinsic_limits))
        if report.lidar is not None:
            failures.extend(_lidar_failures(report.lidar, intrinsic_limits))
    return AcceptanceVerdict(passed=not failures, failures=failures)


def non_increasing(values: Sequence[float | None], tolerance: float = 0.0) -> bool:
    """True when the defined values never rise by more than ``tolerance``; plateaus are allowed."""

    series = [value for value in values if value is not None]
    return all(later <= earlier + tolerance for earlier, later in zip(series, series[1:], strict=False))
