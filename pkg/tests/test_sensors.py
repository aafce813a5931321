import numpy as np
import pytest

from licalib.errors import InvalidArgumentError
from licalib.geometry import matrix_to_quat, quat_multiply, quat_to_matrix, so3_exp
from licalib.sensors import (
    Extrinsics,
    ImuIntrinsics,
    ImuNavState,
    LidarBeamIntrinsics,
    LidarIntrinsics,
    RawLidarPoint,
    accel_jacobians,
    correct_accel,
    correct_gyro,
    gyro_jacobians,
    lidar_map_projection,
    lidar_point_from_raw,
    lidar_point_jacobians,
    lidar_pose_at,
    point_to_plane_residual,
    predict_accel,
    predict_gyro,
    project_raw,
)
from licalib.spline import TrajectorySpline


def _moving_spline(seed: int = 0) -> TrajectorySpline:
    rng = np.random.default_rng(seed)
    positions = np.cumsum(rng.normal(scale=0.05, size=(20, 3)), axis=0)
    quats = [np.array([0.0, 0.0, 0.0, 1.0])]
    for _ in range(19):
        step = so3_exp(rng.normal(scale=0.05, size=3))
        quats.append(matrix_to_quat(quat_to_matrix(quats[-1]) @ quat_to_matrix(step)))
    return TrajectorySpline(0.0, 0.05, positions, np.array(quats))


def _intrinsics() -> ImuIntrinsics:
    return ImuIntrinsics(
        gyro_scale=[1.001, 0.998, 1.002],
        gyro_misalignment=[0.001, -0.002, 0.0015],
        accel_scale=[0.999, 1.003, 1.001],
        accel_misalignment=[-0.001, 0.002, 0.001],
        gyro_rotation=so3_exp([0.01, -0.005, 0.008]),
    )


def _lidar() -> LidarIntrinsics:
    params = [
        [0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        [0.002, -0.003, 0.01, -0.02, 1.001, 0.015],
    ]
    return LidarIntrinsics.from_matrix(np.radians([-5.0, 7.0]), params)


def _extrinsics() -> Extrinsics:
    return Extrinsics(so3_exp([0.02, 0.03, 0.1]), [0.3, 0.15, 0.05], 0.004)


def test_nominal_beam_model_points_along_azimuth() -> None:
    intr = LidarIntrinsics.nominal([0.0, 0.1])
    points = project_raw([0, 1], [10.0, 10.0], [0.0, np.pi / 2], intr)
    assert np.allclose(points[0], [10.0, 0.0, 0.0])
    assert np.allclose(points[1], [0.0, 10.0 * np.cos(0.1), 10.0 * np.sin(0.1)])


def test_beam_offsets_shift_the_ray_origin() -> None:
    beam = LidarBeamIntrinsics(elevation=0.0, vertical=0.02, horizontal=0.03, scale=1.01, range_offset=0.05)
    point = lidar_point_from_raw(RawLidarPoint(0, 0.0, 5.0, 0.0), beam)
    assert np.allclose(point, [1.01 * 5.0 + 0.05, 0.03, 0.02])


def test_lidar_intrinsic_jacobian_matches_finite_differences() -> None:
    intr = _lidar()
    beams, ranges, azimuths = np.array([1, 1]), np.array([4.0, 12.0]), np.array([0.3, -2.1])
    _, jac, range_jac = lidar_point_jacobians(beams, ranges, azimuths, intr)
    base = project_raw(beams, ranges, azimuths, intr)
    eps = 1e-7
    for k in range(6):
        params = intr.as_matrix()
        params[1, k] += eps
        moved = LidarIntrinsics.from_matrix(intr.elevation, params)
        numeric = (project_raw(beams, ranges, azimuths, moved) - base) / eps
        assert np.allclose(numeric, jac[:, :, k], atol=1e-5)
    numeric = (project_raw(beams, ranges + eps, azimuths, intr) - base) / eps
    assert np.allclose(numeric, range_jac, atol=1e-6)


def test_invalid_intrinsics_rejected() -> None:
    with pytest.raises(InvalidArgumentError):
        ImuIntrinsics(gyro_scale=[1.0, 0.0, 1.0])
    with pytest.raises(InvalidArgumentError):
        LidarIntrinsics.from_matrix([0.0], [[0.2, 0.0, 0.0, 0.0, 1.0, 0.0]])


def test_imu_correction_inverts_prediction() -> None:
    spline = _moving_spline()
    nav = ImuNavState(gyro_bias=[0.002, -0.001, 0.003], accel_bias=[0.02, 0.01, -0.03])
    intr = _intrinsics()
    times = np.linspace(0.1, 0.7, 9)
    omega = correct_gyro(predict_gyro(spline, nav, intr, times), nav, intr)
    accel = correct_accel(predict_accel(spline, nav, intr, times), nav, intr)
    assert np.allclose(omega, spline.body_angular_velocity(times), atol=1e-12)
    assert np.allclose(accel, spline.body_acceleration(times, nav.gravity), atol=1e-10)


def test_gyro_intrinsic_jacobians_match_finite_differences() -> None:
    spline = _moving_spline(1)
    nav = ImuNavState()
    intr = _intrinsics()
    t, eps = np.array([0.33]), 1e-7
    jac = gyro_jacobians(spline, nav, intr, t)
    base = predict_gyro(spline, nav, intr, t)
    for k in range(6):
        moved = intr.copy()
        if k < 3:
            moved.gyro_scale[k] += eps
        else:
            moved.gyro_misalignment[k - 3] += eps
        numeric = (predict_gyro(spline, nav, moved, t) - base) / eps
        assert np.allclose(numeric, jac.scale_misalignment[:, :, k], atol=1e-6)
    for axis in range(3):
        delta = np.zeros(3)
        delta[axis] = eps
        moved = intr.copy()
        moved.gyro_rotation = quat_multiply(intr.gyro_rotation, so3_exp(delta))
        numeric = (predict_gyro(spline, nav, moved, t) - base) / eps
        assert np.allclose(numeric, jac.gyro_rotation[:, :, axis], atol=1e-6)


def test_accel_gravity_and_bias_jacobians_match_finite_differences() -> None:
    spline = _moving_spline(2)
    nav = ImuNavState(gravity=[0.1, -0.2, -9.7])
    intr = _intrinsics()
    t, eps = np.array([0.41]), 1e-7
    jac = accel_jacobians(spline, nav, intr, t)
    base = predict_accel(spline, nav, intr, t)
    for axis in range(2):
        delta = np.zeros(2)
        delta[axis] = eps
        moved = nav.copy()
        moved.retract_gravity(delta)
        numeric = (predict_accel(spline, moved, intr, t) - base) / eps
        assert np.allclose(numeric, jac.gravity[:, :, axis], atol=1e-5)
    assert np.allclose(jac.bias[0], np.eye(3))
    assert np.allclose(jac.prediction, base)


def test_static_trajectory_maps_points_to_themselves() -> None:
    quat = so3_exp([0.1, 0, 0.3])
    spline = TrajectorySpline.from_constant(0.0, 0.1, 8, position=[1.0, 2.0, 0.5], quaternion=quat)
    points = np.array([[2.0, 0.5, 0.1], [-1.0, 3.0, 0.7]])
    projection = lidar_map_projection(spline, _extrinsics(), points, np.array([0.2, 0.3]), 0.1)
    assert np.allclose(projection.map_points, points, atol=1e-12)


def test_map_from_lidar_agrees_with_pose_helper() -> None:
    spline = _moving_spline(3)
    ext = _extrinsics()
    point = np.array([[3.0, -1.0, 0.5]])
    projection = lidar_map_projection(spline, ext, point, np.array([0.45]), 0.2)
    pose = lidar_pose_at(spline, ext, 0.45, 0.2)
    assert np.allclose(projection.map_points[0], pose.apply(point[0]))
    assert np.allclose(projection.map_from_lidar[0], pose.rotation)


def test_extrinsic_and_time_offset_jacobians_match_finite_differences() -> None:
    spline = _moving_spline(4)
    ext = _extrinsics()
    points = np.array([[3.0, -1.0, 0.5], [-2.0, 4.0, 1.5]])
    times = np.array([0.31, 0.52])
    projection = lidar_map_projection(spline, ext, points, times, 0.2, with_jacobians=True)
    base = projection.map_points
    eps = 1e-7
    for axis in range(3):
        delta = np.zeros(3)
        delta[axis] = eps
        rotated = Extrinsics(quat_multiply(ext.rotation, so3_exp(delta)), ext.translation, ext.time_offset)
        moved = lidar_map_projection(spline, rotated, points, times, 0.2).map_points
        assert np.allclose((moved - base) / eps, projection.ext_rot_jac[:, :, axis], atol=1e-5)
        shifted = Extrinsics(ext.rotation, ext.translation + delta, ext.time_offset)
        moved = lidar_map_projection(spline, shifted, points, times, 0.2).map_points
        assert np.allclose((moved - base) / eps, projection.ext_trans_jac[:, :, axis], atol=1e-5)
    delayed = Extrinsics(ext.rotation, ext.translation, ext.time_offset + eps)
    moved = lidar_map_projection(spline, delayed, points, times, 0.2).map_points
    assert np.allclose((moved - projection.map_points) / eps, projection.time_offset_jac, atol=1e-4)


def test_point_on_plane_has_zero_residual() -> None:
    spline = TrajectorySpline.from_constant(0.0, 0.1, 8)
    beam = LidarBeamIntrinsics(elevation=0.0)
    raw = RawLidarPoint(0, 0.2, 4.0, 0.0)
    residual, weight = point_to_plane_residual(spline, Extrinsics(), beam, raw, [1.0, 0.0, 0.0], -4.0, 0.1)
    assert residual == pytest.approx(0.0, abs=1e-12)
    assert weight == pytest.approx(1.0 / 0.01**2)


def test_point_to_plane_residual_ignores_global_frame_choice() -> None:
    spline = _moving_spline(3)
    frame = so3_exp([0.4, -1.1, 2.0])
    shift = np.array([12.0, -3.5, 0.75])
    moved = TrajectorySpline(
        spline.t0,
        spline.dt,
        spline.positions @ quat_to_matrix(frame).T + shift,
        np.array([quat_multiply(frame, q) for q in spline.quaternions]),
    )
    beam = LidarBeamIntrinsics(0.1, 0.002, -0.003, 0.01, -0.02, 1.001, 0.015)
    raw = RawLidarPoint(1, 0.45, 6.0, 0.8)
    normal = np.array([0.6, 0.0, 0.8])
    before = point_to_plane_residual(spline, _extrinsics(), beam, raw, normal, -2.0, 0.3)
    after = point_to_plane_residual(moved, _extrinsics(), beam, raw, normal, -2.0, 0.3)
    assert after[0] == pytest.approx(before[0], abs=1e-9)
    assert after[1] == pytest.approx(before[1], rel=1e-9)
