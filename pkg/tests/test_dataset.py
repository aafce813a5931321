from pathlib import Path

import numpy as np
import pytest

from licalib.config import build_config
from licalib.dataset import (
    GROUND_TRUTH_FILE,
    ground_truth_from_record,
    read_dataset,
    read_ground_truth,
    scans_in_window,
    subsample_scan,
    write_dataset,
    write_ground_truth,
)
from licalib.errors import DatasetError
from licalib.sensors import ImuStream, LidarScan
from licalib.simulator import GroundTruth, figure8_trajectory, sample_random_calibration


def _imu(count: int = 5) -> ImuStream:
    times = np.arange(count) * 0.0025
    gyro = np.column_stack([times, -times, np.full(count, 0.1)])
    accel = np.tile([0.0, 0.1, 9.8], (count, 1))
    return ImuStream(times, gyro, accel)


def _raw_scan(start: float, count: int = 6) -> LidarScan:
    times = start + np.arange(count) * 0.001
    ranges = np.linspace(1.0, 6.0, count)
    return LidarScan(start, times, np.arange(count) % 3, ranges, np.linspace(0.0, 3.0, count))


def _xyz_scan(start: float) -> LidarScan:
    points = np.array([[1.0, 2.0, 0.5], [3.0, -1.0, 0.2]])
    return LidarScan(start, np.array([start, start + 0.05]), points=points)


def test_written_dataset_reads_back_with_detected_format(tmp_path: Path) -> None:
    write_dataset(_imu(), [_raw_scan(0.0), _raw_scan(0.1)], tmp_path)
    data = read_dataset(tmp_path)
    assert data.lidar_format == "raw"
    assert len(data.imu) == 5
    assert len(data.scans) == 2
    assert data.scans[1].start_time == pytest.approx(0.1)
    assert list(data.scans[0].beams) == [0, 1, 2, 0, 1, 2]
    assert np.allclose(data.scans[1].ranges, np.linspace(1.0, 6.0, 6))
    assert data.time_span == (pytest.approx(0.0), pytest.approx(0.01))


def test_pre_projected_scans_are_detected(tmp_path: Path) -> None:
    write_dataset(_imu(), [_xyz_scan(0.0)], tmp_path)
    data = read_dataset(tmp_path)
    assert data.lidar_format == "xyz"
    assert not data.scans[0].is_raw
    assert np.allclose(data.scans[0].points[1], [3.0, -1.0, 0.2])


def test_imu_stride_keeps_every_nth_sample(tmp_path: Path) -> None:
    write_dataset(_imu(9), [_raw_scan(0.0)], tmp_path)
    assert len(read_dataset(tmp_path, imu_stride=4).imu) == 3


def test_missing_directory_and_files(tmp_path: Path) -> None:
    with pytest.raises(DatasetError):
        read_dataset(tmp_path / "absent")
    with pytest.raises(DatasetError, match="imu.csv"):
        read_dataset(tmp_path)


def test_wrong_column_count_is_reported(tmp_path: Path) -> None:
    write_dataset(_imu(), [_raw_scan(0.0)], tmp_path)
    (tmp_path / "imu.csv").write_text("t,wx\n0.0,1.0\n0.1,2.0\n", encoding="utf-8")
    with pytest.raises(DatasetError, match="expected 7 columns"):
        read_dataset(tmp_path)


def test_unknown_lidar_header_is_rejected(tmp_path: Path) -> None:
    write_dataset(_imu(), [_raw_scan(0.0)], tmp_path)
    (tmp_path / "lidar" / "scan_000000.csv").write_text("a,b,c,d\n1,2,3,4\n", encoding="utf-8")
    with pytest.raises(DatasetError, match="unknown LiDAR header"):
        read_dataset(tmp_path)


def test_decreasing_point_stamps_are_rejected(tmp_path: Path) -> None:
    scan = _raw_scan(0.0)
    scan.times = scan.times[::-1].copy()
    write_dataset(_imu(), [scan], tmp_path)
    with pytest.raises(DatasetError, match="non-decreasing"):
        read_dataset(tmp_path)


def test_non_increasing_imu_stamps_are_rejected(tmp_path: Path) -> None:
    write_dataset(_imu(), [_raw_scan(0.0)], tmp_path)
    (tmp_path / "imu.csv").write_text(
        "t,wx,wy,wz,ax,ay,az\n0.0,0,0,0,0,0,9.8\n0.0,0,0,0,0,0,9.8\n", encoding="utf-8"
    )
    with pytest.raises(DatasetError):
        read_dataset(tmp_path)


def test_subsample_rotates_phase() -> None:
    scan = _raw_scan(0.0, count=16)
    reduced = subsample_scan(scan, 4)
    assert np.allclose(reduced.times, scan.times[[0, 5, 10, 15]])
    assert subsample_scan(scan, 1) is scan


def test_window_keeps_only_complete_scans() -> None:
    scans = [_raw_scan(0.0), _raw_scan(0.1), _raw_scan(0.2)]
    kept = scans_in_window(scans, 0.05, 0.2)
    assert [scan.start_time for scan in kept] == [0.1]


def test_ground_truth_sidecar_rebuilds_truth(tmp_path: Path) -> None:
    config = build_config({"simulation": {"trajectory": "figure8", "mounting": "B", "time_offset": 0.002}})
    calibration = sample_random_calibration(4, config)
    motion = figure8_trajectory(10.0, "B")
    truth = GroundTruth(motion, calibration, np.zeros(3), np.zeros(3), mounting="B", seed=4)
    write_ground_truth(truth, config, tmp_path / GROUND_TRUTH_FILE)
    record = read_ground_truth(tmp_path / GROUND_TRUTH_FILE)
    rebuilt = ground_truth_from_record(record)
    assert record.trajectory == "figure8"
    assert rebuilt.extrinsics.time_offset == pytest.approx(0.002)
    assert np.allclose(rebuilt.calibration.lidar.as_matrix(), calibration.lidar.as_matrix())
    rotation, translation = rebuilt.lidar_pose([1.0])
    expected_rotation, expected_translation = truth.lidar_pose([1.0])
    assert np.allclose(rotation, expected_rotation)
    assert np.allclose(translation, expected_translation)


def test_invalid_sidecar_is_a_dataset_error(tmp_path: Path) -> None:
    path = tmp_path / GROUND_TRUTH_FILE
    path.write_text('{"seed": "many"}', encoding="utf-8")
    with pytest.raises(DatasetError):
        read_ground_truth(path)
