"""Dataset directory format.

A dataset directory holds::

    imu.csv              t,wx,wy,wz,ax,ay,az
    scans.csv            scan,start_time,file
    lidar/scan_NNNNNN.csv  beam,t,range,azimuth   (raw)  or  t,x,y,z  (xyz)
    ground_truth.json    optional simulator sidecar
"""

from __future__ import annotations

import csv
import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from licalib.config import RunConfig
from licalib.errors import DatasetError
from licalib.geometry import matrix_to_euler, quat_to_matrix
from licalib.schemas import GroundTruthRecord, ImuIntrinsicEstimate, LidarBeamEstimate
from licalib.sensors import Extrinsics, ImuIntrinsics, ImuStream, LidarIntrinsics, LidarScan
from licalib.simulator import (
    AnalyticTrajectory,
    CalibrationTruth,
    GroundTruth,
    SimulatedDataset,
    alternating_trajectory,
    mounting_case,
    unobservable_direction,
)

logger = logging.getLogger(__name__)

IMU_FILE = "imu.csv"
SCAN_INDEX_FILE = "scans.csv"
LIDAR_DIR = "lidar"
GROUND_TRUTH_FILE = "ground_truth.json"
IMU_HEADER = "t,wx,wy,wz,ax,ay,az"
RAW_HEADER = "beam,t,range,azimuth"
XYZ_HEADER = "t,x,y,z"


@dataclass
class Dataset:
    root: Path
    imu: ImuStream
    scans: list[LidarScan]
    lidar_format: str = "raw"

    @property
    def time_span(self) -> tuple[float, float]:
        return float(self.imu.times[0]), float(self.imu.times[-1])


# -- intrinsic records ---------------------------------------------------------------


def imu_record(intr: ImuIntrinsics) -> ImuIntrinsicEstimate:
    return ImuIntrinsicEstimate(
        gyro_scale=intr.gyro_scale.tolist(),
        gyro_misalignment=intr.gyro_misalignment.tolist(),
        accel_scale=intr.accel_scale.tolist(),
        accel_misalignment=intr.accel_misalignment.tolist(),
        gyro_rotation_xyzw=intr.gyro_rotation.tolist(),
        gyro_rotation_euler_deg=np.degrees(matrix_to_euler(quat_to_matrix(intr.gyro_rotation))).tolist(),
    )


def imu_from_record(record: ImuIntrinsicEstimate) -> ImuIntrinsics:
    return ImuIntrinsics(
        gyro_scale=record.gyro_scale,
        gyro_misalignment=record.gyro_misalignment,
        accel_scale=record.accel_scale,
        accel_misalignment=record.accel_misalignment,
        gyro_rotation=record.gyro_rotation_xyzw,
    )


def lidar_records(intr: LidarIntrinsics) -> list[LidarBeamEstimate]:
    params = intr.as_matrix()
    return [
        LidarBeamEstimate(
            beam=beam,
            elevation_deg=float(np.degrees(intr.elevation[beam])),
            d_elevation_deg=float(np.degrees(params[beam, 0])),
            d_azimuth_deg=float(np.degrees(params[beam, 1])),
            vertical=float(params[beam, 2]),
            horizontal=float(params[beam, 3]),
            scale=float(params[beam, 4]),
            range_offset=float(params[beam, 5]),
        )
        for beam in range(intr.num_beams)
    ]


def lidar_from_records(records: Sequence[LidarBeamEstimate]) -> LidarIntrinsics:
    ordered = sorted(records, key=lambda item: item.beam)
    elevations = np.radians([item.elevation_deg for item in ordered])
    params = [
        [
            np.radians(item.d_elevation_deg),
            np.radians(item.d_azimuth_deg),
            item.vertical,
            item.horizontal,
            item.scale,
            item.range_offset,
        ]
        for item in ordered
    ]
    return LidarIntrinsics.from_matrix(elevations, params)


# -- writing -------------------------------------------------------------------------


def _scan_file(index: int) -> str:
    return f"{LIDAR_DIR}/scan_{index:06d}.csv"


def write_scan(scan: LidarScan, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if scan.is_raw:
        table = np.column_stack([scan.beams, scan.times, scan.ranges, scan.azimuths])
        fmt = ["%d", "%.9f", "%.9f", "%.12f"]
        np.savetxt(path, table, delimiter=",", header=RAW_HEADER, comments="", fmt=fmt)
    else:
        table = np.column_stack([scan.times, scan.points])
        np.savetxt(path, table, delimiter=",", header=XYZ_HEADER, comments="", fmt="%.9f")
    return path


def write_dataset(imu: ImuStream, scans: Sequence[LidarScan], directory: Path) -> Path:
    """Write the IMU stream, one CSV per scan and the scan index."""

    directory.mkdir(parents=True, exist_ok=True)
    np.savetxt(
        directory / IMU_FILE,
        np.column_stack([imu.times, imu.gyro, imu.accel]),
        delimiter=",",
        header=IMU_HEADER,
        comments="",
        fmt="%.12g",
    )
    with (directory / SCAN_INDEX_FILE).open("w", encoding="utf-8", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["scan", "start_time", "file"])
        for index, scan in enumerate(scans):
            name = _scan_file(index)
            write_scan(scan, directory / name)
            writer.writerow([index, f"{scan.start_time:.9f}", name])
    logger.info("dataset written: %s (%d IMU samples, %d scans)", directory.as_posix(), len(imu), len(scans))
    return directory


def write_simulated_dataset(dataset: SimulatedDataset, config: RunConfig, directory: Path) -> Path:
    write_dataset(dataset.imu, dataset.scans, directory)
    write_ground_truth(dataset.truth, config, directory / GROUND_TRUTH_FILE)
    return directory


def ground_truth_record(truth: GroundTruth, config: RunConfig) -> GroundTruthRecord:
    sim = config.simulation
    ext = truth.extrinsics
    return GroundTruthRecord(
        seed=truth.seed,
        trajectory=sim.trajectory,
        mounting=truth.mounting,
        duration=sim.duration,
        segment_length=sim.segment_length,
        blend_time=sim.blend_time,
        gravity=truth.gravity.tolist(),
        extrinsic_rotation_xyzw=ext.rotation.tolist(),
        extrinsic_translation=ext.translation.tolist(),
        time_offset=ext.time_offset,
        gyro_bias=truth.gyro_bias.tolist(),
        accel_bias=truth.accel_bias.tolist(),
        imu=imu_record(truth.calibration.imu),
        lidar=lidar_records(truth.calibration.lidar),
        unobservable_direction=unobservable_direction(truth.mounting).tolist(),
        imu_rate_hz=config.imu.rate_hz,
        scan_period=sim.scan_period,
    )


def write_ground_truth(truth: GroundTruth, config: RunConfig, path: Path) -> Path:
    record = ground_truth_record(truth, config)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(record.model_dump(mode="json"), indent=2, ensure_ascii=False)
    path.write_text(payload, encoding="utf-8")
    return path


# -- reading -------------------------------------------------------------------------


def _load_table(path: Path, columns: int) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"{path.as_posix()}: file not found")
    try:
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise DatasetError(f"{path.as_posix()}: malformed CSV ({exc})") from exc
    if table.size == 0:
        return np.zeros((0, columns))
    if table.shape[1] != columns:
        raise DatasetError(f"{path.as_posix()}: expected {columns} columns, found {table.shape[1]}")
    return table


def _header(path: Path) -> str:
    with path.open("r", encoding="utf-8") as fp:
        return fp.readline().strip()


def read_scan(path: Path, start_time: float, lidar_format: str | None = None) -> tuple[LidarScan, str]:
    fmt = lidar_format
    if fmt is None:
        if not path.exists():
            raise DatasetError(f"{path.as_posix()}: file not found")
        header = _header(path)
        if header not in (RAW_HEADER, XYZ_HEADER):
            raise DatasetError(f"{path.as_posix()}: unknown LiDAR header {header!r}")
        fmt = "raw" if header == RAW_HEADER else "xyz"
    if fmt == "raw":
        table = _load_table(path, 4)
        scan = LidarScan(start_time, table[:, 1], table[:, 0].astype(int), table[:, 2], table[:, 3])
    else:
        table = _load_table(path, 4)
        scan = LidarScan(start_time, table[:, 0], points=table[:, 1:4])
    if len(scan.times) > 1 and np.any(np.diff(scan.times) < 0.0):
        raise DatasetError(f"{path.as_posix()}: point timestamps must be non-decreasing")
    return scan, fmt


def read_dataset(directory: Path, lidar_format: str | None = None, imu_stride: int = 1) -> Dataset:
    """Load a dataset directory; ``imu_stride`` keeps every n-th IMU sample."""

    if not directory.is_dir():
        raise DatasetError(f"{directory.as_posix()}: dataset directory not found")
    table = _load_table(directory / IMU_FILE, 7)
    if len(table) < 2:
        raise DatasetError(f"{(directory / IMU_FILE).as_posix()}: at least two IMU samples are required")
    table = table[::imu_stride]
    try:
        imu = ImuStream(table[:, 0], table[:, 1:4], table[:, 4:7])
    except ValueError as exc:
        raise DatasetError(f"{(directory / IMU_FILE).as_posix()}: {exc}") from exc

    index_path = directory / SCAN_INDEX_FILE
    if not index_path.exists():
        raise DatasetError(f"{index_path.as_posix()}: file not found")
    scans: list[LidarScan] = []
    detected = lidar_format
    with index_path.open("r", encoding="utf-8", newline="") as fp:
        for row in csv.DictReader(fp):
            try:
                start = float(row["start_time"])
                name = row["file"]
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{index_path.as_posix()}: malformed row {row!r}") from exc
            scan, detected = read_scan(directory / name, start, detected)
            scans.append(scan)
    logger.info("dataset loaded: %s (%d IMU samples, %d scans)", directory.as_posix(), len(imu), len(scans))
    return Dataset(directory, imu, scans, detected or "raw")


def read_ground_truth(path: Path) -> GroundTruthRecord:
    if not path.exists():
        raise DatasetError(f"{path.as_posix()}: file not found")
    try:
        return GroundTruthRecord.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise DatasetError(f"{path.as_posix()}: invalid ground truth ({exc.error_count()} errors)") from exc


def ground_truth_from_record(record: GroundTruthRecord) -> GroundTruth:
    """Rebuild the analytic motion and calibration a sidecar describes."""

    if record.trajectory == "alternating":
        motion = alternating_trajectory(
            record.duration, record.segment_length, record.blend_time, record.mounting
        )
    else:
        motion = AnalyticTrajectory(record.trajectory, record.duration, mounting_case(record.mounting))
    calibration = CalibrationTruth(
        imu_from_record(record.imu),
        lidar_from_records(record.lidar),
        Extrinsics(record.extrinsic_rotation_xyzw, record.extrinsic_translation, record.time_offset),
    )
    return GroundTruth(
        motion=motion,
        calibration=calibration,
        gyro_bias=np.asarray(record.gyro_bias),
        accel_bias=np.asarray(record.accel_bias),
        gravity=np.asarray(record.gravity),
        mounting=record.mounting,
        seed=record.seed,
    )


# -- selection -----------------------------------------------------------------------


def subsample_scan(scan: LidarScan, stride: int) -> LidarScan:
    """Keep one point in ``stride``, rotating the phase so interleaved beams are all sampled."""

    if stride <= 1:
        return scan
    index = np.arange(len(scan))
    keep = (index % stride) == ((index // stride) % stride)
    return scan.subset(np.flatnonzero(keep))


def scans_in_window(scans: Sequence[LidarScan], t_start: float, t_end: float) -> list[LidarScan]:
    """Scans whose every point stamp lies inside ``[t_start, t_end]``."""

    return [
        scan
        for scan in scans
        if len(scan) and scan.start_time >= t_start and float(scan.times.max()) <= t_end
    ]
