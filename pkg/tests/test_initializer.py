import numpy as np
import pytest

from licalib.errors import DegenerateRotationError, InsufficientDataError, InvalidArgumentError
from licalib.geometry import (
    RigidTransform,
    exp_matrix,
    log_matrix,
    matrix_to_quat,
    quat_multiply,
    quat_to_matrix,
)
from licalib.initializer import (
    RotationPair,
    init_extrinsic_rotation,
    init_gravity,
    init_rotation_spline,
    init_translation_spline,
    integrate_gyro,
    perturb_extrinsics,
    rotation_pairs,
)
from licalib.odometry import OdometryPose, OdometryResult
from licalib.sensors import Extrinsics, ImuStream
from licalib.spline import TrajectorySpline


def _constant_rate_imu(rate: np.ndarray, duration: float = 1.0, hz: float = 400.0) -> ImuStream:
    times = np.arange(0.0, duration + 1e-9, 1.0 / hz)
    gyro = np.tile(rate, (len(times), 1))
    accel = np.tile([0.0, 0.0, 9.8], (len(times), 1))
    return ImuStream(times, gyro, accel)


def _pairs(extrinsic: np.ndarray, axes: list[np.ndarray]) -> list[RotationPair]:
    pairs = []
    for axis in axes:
        lidar = exp_matrix(axis)
        imu = extrinsic @ lidar @ extrinsic.T
        angle = float(np.degrees(np.linalg.norm(axis)))
        pairs.append(RotationPair(matrix_to_quat(imu), matrix_to_quat(lidar), angle))
    return pairs


def test_gyro_integration_matches_closed_form() -> None:
    rate = np.array([0.1, -0.2, 0.4])
    imu = _constant_rate_imu(rate)
    rotations = integrate_gyro(imu)
    assert np.allclose(rotations[0], np.eye(3))
    assert np.allclose(rotations[-1], exp_matrix(rate * imu.times[-1]), atol=1e-9)


def test_rotation_spline_follows_gyro() -> None:
    rate = np.array([0.0, 0.3, 0.5])
    spline = init_rotation_spline(_constant_rate_imu(rate), 0.1, 0.9, 0.05, sigma=0.01)
    times = np.linspace(0.2, 0.8, 7)
    assert np.allclose(spline.body_angular_velocity(times), rate, atol=1e-3)


def test_rotation_spline_needs_samples_in_window() -> None:
    with pytest.raises(InsufficientDataError):
        init_rotation_spline(_constant_rate_imu(np.zeros(3), duration=0.5), 2.0, 3.0, 0.05, sigma=0.01)


def test_hand_eye_recovers_extrinsic_rotation() -> None:
    extrinsic = exp_matrix(np.array([0.1, -0.4, 1.2]))
    axes = [np.array([0.3, 0.0, 0.0]), np.array([0.0, 0.2, 0.1]), np.array([0.05, -0.1, 0.25])]
    quat, ratio = init_extrinsic_rotation(_pairs(extrinsic, axes))
    assert ratio > 1e-3
    assert np.linalg.norm(log_matrix(quat_to_matrix(quat).T @ extrinsic)) < 1e-9
    assert quat[3] >= 0.0


def test_single_axis_motion_is_degenerate() -> None:
    extrinsic = exp_matrix(np.array([0.1, -0.4, 1.2]))
    axes = [np.array([0.0, 0.0, angle]) for angle in (0.1, 0.2, -0.3)]
    with pytest.raises(DegenerateRotationError):
        init_extrinsic_rotation(_pairs(extrinsic, axes))


def test_hand_eye_needs_two_pairs() -> None:
    with pytest.raises(InsufficientDataError):
        init_extrinsic_rotation(_pairs(np.eye(3), [np.array([0.1, 0.0, 0.0])]))


def _yaw_spline(rate: float = 1.0, dt: float = 0.05, num_knots: int = 23) -> TrajectorySpline:
    quats = np.array([matrix_to_quat(exp_matrix([0.0, 0.0, rate * dt * i])) for i in range(num_knots)])
    return TrajectorySpline(0.0, dt, np.zeros((num_knots, 3)), quats)


def _lever_odometry(
    rotation: TrajectorySpline, velocity: np.ndarray, lever: np.ndarray, times: np.ndarray
) -> OdometryResult:
    """LiDAR translations from the first scan for IMU positions ``velocity * t`` and ``p_IL = lever``."""

    rotations = rotation.eval_rotation_matrix(times)
    poses = []
    for k, t in enumerate(times):
        imu_shift = velocity * (t - times[0]) + (rotations[k] - rotations[0]) @ lever
        poses.append(OdometryPose(k, float(t), RigidTransform(np.eye(3), rotations[0].T @ imu_shift)))
    return OdometryResult("plane-icp", poses)


def test_translation_spline_follows_odometry() -> None:
    rotation = TrajectorySpline.covering(0.0, 1.0, 0.05)
    velocity = np.array([0.5, -0.2, 0.1])
    poses = [
        OdometryPose(k, 0.1 * k, RigidTransform(np.eye(3), velocity * 0.1 * k)) for k in range(11)
    ]
    spline = init_translation_spline(rotation, OdometryResult("plane-icp", poses), np.eye(3))
    times = np.linspace(0.0, 1.0, 11)
    displacement = spline.eval_position(times) - spline.eval_position(0.0)
    assert isinstance(spline, TrajectorySpline)
    assert np.allclose(displacement, np.outer(times, velocity), atol=2e-3)
    assert np.allclose(spline.positions[0], 0.0)
    assert np.array_equal(spline.quaternions, rotation.quaternions)


def test_zero_translation_guess_leaves_lever_arm_in_trajectory() -> None:
    rotation = _yaw_spline()
    velocity = np.array([0.4, 0.1, 0.0])
    lever = np.array([0.3, 0.0, 0.0])
    times = np.linspace(0.0, 1.0, 11)
    odometry = _lever_odometry(rotation, velocity, lever, times)

    spline = init_translation_spline(rotation, odometry, np.eye(3))

    rotations = rotation.eval_rotation_matrix(times)
    displacement = spline.eval_position(times) - spline.eval_position(times[0])
    absorbed = np.outer(times, velocity) + np.einsum("nab,b->na", rotations - rotations[0], lever)
    assert np.allclose(displacement, absorbed, atol=5e-3)


def test_translation_guess_is_moved_to_the_right_hand_side() -> None:
    rotation = _yaw_spline()
    velocity = np.array([0.4, 0.1, 0.0])
    lever = np.array([0.3, 0.0, 0.0])
    times = np.linspace(0.0, 1.0, 11)
    odometry = _lever_odometry(rotation, velocity, lever, times)

    spline = init_translation_spline(rotation, odometry, np.eye(3), translation_guess=lever)

    displacement = spline.eval_position(times) - spline.eval_position(times[0])
    assert np.allclose(displacement, np.outer(times, velocity), atol=2e-3)


def test_translation_guess_must_be_a_3_vector() -> None:
    rotation = _yaw_spline()
    odometry = _lever_odometry(rotation, np.zeros(3), np.zeros(3), np.linspace(0.0, 1.0, 11))
    with pytest.raises(InvalidArgumentError):
        init_translation_spline(rotation, odometry, np.eye(3), translation_guess=[0.1, 0.2])


def test_translation_spline_needs_poses() -> None:
    rotation = TrajectorySpline.covering(0.0, 1.0, 0.05)
    poses = [OdometryPose(0, 0.0, RigidTransform.identity())]
    with pytest.raises(InsufficientDataError):
        init_translation_spline(rotation, OdometryResult("plane-icp", poses), np.eye(3))


def test_gravity_from_stationary_accelerometer() -> None:
    trajectory = TrajectorySpline.covering(0.0, 1.0, 0.05)
    gravity = init_gravity(trajectory, _constant_rate_imu(np.zeros(3)), gravity_norm=9.81)
    assert np.allclose(gravity, [0.0, 0.0, -9.81])


def test_perturbation_has_requested_size() -> None:
    base = Extrinsics(matrix_to_quat(exp_matrix(np.array([0.1, 0.2, 0.3]))), [0.3, 0.15, 0.05], 0.002)
    moved = perturb_extrinsics(base, rotation_deg=2.0, translation_m=0.05, seed=1)
    angle = np.degrees(np.linalg.norm(log_matrix(base.rotation_matrix().T @ moved.rotation_matrix())))
    assert angle == pytest.approx(2.0)
    assert np.linalg.norm(moved.translation - base.translation) == pytest.approx(0.05)
    assert moved.time_offset == pytest.approx(0.002)
    same = perturb_extrinsics(base, 0.0, 0.0, seed=1)
    assert np.allclose(same.translation, base.translation)


def _wobble_odometry(spline: TrajectorySpline, extrinsic: np.ndarray, frame: np.ndarray) -> OdometryResult:
    times = np.linspace(0.05, 0.95, 10)
    rotations = spline.eval_rotation_matrix(times)
    poses = [
        OdometryPose(k, float(t), RigidTransform(frame @ extrinsic.T @ rotations[k] @ extrinsic, np.zeros(3)))
        for k, t in enumerate(times)
    ]
    return OdometryResult("plane-icp", poses)


def test_hand_eye_rotation_ignores_global_frames() -> None:
    angles = [[0.4 * np.sin(0.8 * i), 0.4 * np.cos(0.6 * i), 0.15 * i] for i in range(23)]
    quats = np.array([matrix_to_quat(exp_matrix(phi)) for phi in angles])
    spline = TrajectorySpline(0.0, 0.05, np.zeros((23, 3)), quats)
    extrinsic = exp_matrix([0.2, -0.5, 0.9])
    imu_frame = matrix_to_quat(exp_matrix([1.0, 0.3, -2.0]))
    moved = TrajectorySpline(
        0.0, 0.05, np.zeros((23, 3)), np.array([quat_multiply(imu_frame, q) for q in quats])
    )
    pairs = rotation_pairs(_wobble_odometry(spline, extrinsic, np.eye(3)), spline)
    quat, ratio = init_extrinsic_rotation(pairs)
    lidar_frame = exp_matrix([-0.7, 0.1, 0.4])
    shifted = rotation_pairs(_wobble_odometry(spline, extrinsic, lidar_frame), moved)
    quat_moved, ratio_moved = init_extrinsic_rotation(shifted)
    assert np.allclose(quat_moved, quat, atol=1e-8)
    assert ratio_moved == pytest.approx(ratio, rel=1e-6)
    assert np.linalg.norm(log_matrix(quat_to_matrix(quat).T @ extrinsic)) < 1e-6
