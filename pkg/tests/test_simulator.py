import numpy as np
import pytest

from licalib.config import RunConfig, build_config
from licalib.errors import DomainError, InvalidArgumentError
from licalib.geometry import so3_exp
from licalib.sensors import (
    LidarBeamIntrinsics,
    lidar_point_from_raw,
    predict_accel,
    predict_gyro,
    project_raw,
)
from licalib.simulator import (
    AnalyticTrajectory,
    GroundTruth,
    SplineMotion,
    default_room,
    figure8_trajectory,
    generate_imu,
    lidar_raw_from_point,
    mounting_case,
    sample_random_calibration,
    simulate_dataset,
    truth_nav_state,
    unobservable_direction,
)
from licalib.spline import TrajectorySpline


def _config(**simulation: object) -> RunConfig:
    defaults = {"duration": 1.0, "azimuth_step_deg": 2.0, "seed": 5}
    return build_config({"simulation": {**defaults, **simulation}})


def test_raw_inversion_reproduces_point() -> None:
    beam = LidarBeamIntrinsics(
        elevation=np.radians(7.0),
        d_elevation=0.002,
        d_azimuth=-0.003,
        vertical=0.01,
        horizontal=-0.02,
        scale=1.002,
        range_offset=0.015,
    )
    point = np.array([3.0, -4.0, 0.7])
    raw = lidar_raw_from_point(point, beam, time=0.25, beam_index=3)
    assert raw.beam == 3
    assert raw.time == pytest.approx(0.25)
    assert np.allclose(lidar_point_from_raw(raw, beam), point, atol=1e-9)


def test_unknown_trajectory_and_mounting_rejected() -> None:
    with pytest.raises(InvalidArgumentError):
        AnalyticTrajectory("spiral", 10.0)
    with pytest.raises(InvalidArgumentError):
        mounting_case("D")


def test_trajectory_is_bounded_in_time() -> None:
    motion = figure8_trajectory(duration=5.0)
    motion.kinematics([0.0, 5.0])
    with pytest.raises(DomainError):
        motion.kinematics([5.5])


def test_figure8_is_planar_yaw_motion() -> None:
    kin = figure8_trajectory(duration=10.0).kinematics(np.linspace(0.0, 10.0, 50))
    assert np.allclose(kin.position[:, 2], 2.0)
    assert np.allclose(kin.omega[:, :2], 0.0, atol=1e-12)


def test_unobservable_direction_is_imu_vertical() -> None:
    for case in ("A", "B", "C"):
        direction = unobservable_direction(case)
        assert np.allclose(direction[:3], 0.0)
        assert np.linalg.norm(direction[3:]) == pytest.approx(1.0)
        assert np.allclose(mounting_case(case) @ direction[3:], [0.0, 0.0, 1.0])


def test_random_calibration_keeps_first_beam_reference() -> None:
    truth = sample_random_calibration(3, _config())
    params = truth.lidar.as_matrix()
    assert np.allclose(params[0, :4], 0.0)
    assert truth.lidar.num_beams == 16
    again = sample_random_calibration(3, _config())
    assert np.allclose(again.lidar.as_matrix(), params)


def test_noise_free_imu_matches_measurement_model() -> None:
    rng = np.random.default_rng(2)
    positions = np.cumsum(rng.normal(scale=0.05, size=(30, 3)), axis=0)
    quats = [so3_exp(rng.normal(scale=0.3, size=3)) for _ in range(30)]
    spline = TrajectorySpline(0.0, 0.05, positions, np.array(quats))
    calibration = sample_random_calibration(1, _config())
    truth = GroundTruth(SplineMotion(spline), calibration, np.array([0.01, 0.0, -0.01]), np.zeros(3))
    imu = generate_imu(SplineMotion(spline), truth, 400.0, 1.0)
    nav = truth_nav_state(truth)
    intr = truth.calibration.imu
    assert len(imu) == 400
    assert np.allclose(imu.gyro, predict_gyro(spline, nav, intr, imu.times), atol=1e-9)
    assert np.allclose(imu.accel, predict_accel(spline, nav, intr, imu.times), atol=1e-8)


def test_dataset_sizes_and_time_offset() -> None:
    config = _config(time_offset=0.003)
    data = simulate_dataset(config)
    assert len(data.imu) == 400
    assert len(data.scans) == 10
    assert data.scans[1].start_time == pytest.approx(0.1 - 0.003)
    assert np.all(data.scans[1].times >= data.scans[1].start_time)


def test_simulation_is_deterministic_per_seed() -> None:
    first = simulate_dataset(_config())
    second = simulate_dataset(_config())
    assert np.array_equal(first.imu.gyro, second.imu.gyro)
    assert np.array_equal(first.scans[4].ranges, second.scans[4].ranges)
    third = simulate_dataset(_config(seed=6))
    assert not np.array_equal(first.imu.gyro, third.imu.gyro)


def test_noise_free_returns_lie_on_scene_planes() -> None:
    config = _config(imu_noise=False, lidar_noise=False)
    data = simulate_dataset(config)
    scan = data.scans[3]
    intr = data.truth.calibration.lidar
    local = project_raw(scan.beams, scan.ranges, scan.azimuths, intr)
    rotation, translation = data.truth.lidar_pose(scan.times + data.truth.extrinsics.time_offset)
    world = np.einsum("nab,nb->na", rotation, local) + translation
    room = default_room()
    normals = np.array([plane.normal for plane in room.planes])
    offsets = np.array([plane.offset for plane in room.planes])
    distance = np.min(np.abs(world @ normals.T + offsets), axis=1)
    assert len(scan) > 1000
    assert np.max(distance) < 1e-6
