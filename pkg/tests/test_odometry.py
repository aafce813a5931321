import numpy as np
import pytest
from scipy.spatial import cKDTree

from licalib.config import OdometryConfig
from licalib.errors import InsufficientDataError, InvalidArgumentError
from licalib.geometry import RigidTransform, exp_matrix, log_matrix
from licalib.odometry import (
    derotate_points,
    estimate_normals,
    perturbed_reference_odometry,
    plane_icp_odometry,
    simple_odometry,
    voxel_downsample,
)
from licalib.sensors import LidarIntrinsics, LidarScan
from licalib.spline import TrajectorySpline


def _corner() -> np.ndarray:
    """Floor and two walls meeting at the origin."""

    grid = np.linspace(0.0, 3.0, 31)
    a, b = (values.ravel() for values in np.meshgrid(grid, grid))
    zeros = np.zeros_like(a)
    return np.vstack(
        [
            np.column_stack([a, b, zeros]),
            np.column_stack([zeros, a, b]),
            np.column_stack([a, zeros, b]),
        ]
    )


def _motion() -> RigidTransform:
    return RigidTransform(exp_matrix(np.radians([0.5, -0.3, 2.0])), np.array([0.05, -0.03, 0.02]))


def test_voxel_downsample_returns_centroids() -> None:
    points = np.array([[0.01, 0.01, 0.01], [0.03, 0.05, 0.07], [1.05, 0.0, 0.0]])
    reduced = voxel_downsample(points, 0.1)
    assert len(reduced) == 2
    assert any(np.allclose(row, [0.02, 0.03, 0.04]) for row in reduced)


def test_normals_of_flat_patch() -> None:
    grid = np.linspace(0.0, 1.0, 11)
    xs, ys = np.meshgrid(grid, grid)
    points = np.column_stack([xs.ravel(), ys.ravel(), np.full(xs.size, 2.0)])
    normals, planarity = estimate_normals(points, cKDTree(points), 10)
    assert np.allclose(np.abs(normals[:, 2]), 1.0)
    assert np.all(planarity > 0.3)


def test_plane_icp_recovers_known_motion() -> None:
    target = _corner()
    motion = _motion()
    source = motion.inverse().apply(target)
    config = OdometryConfig(voxel_size=0.1, max_iterations=30)
    result = plane_icp_odometry([(0.0, target), (0.1, source)], config)
    estimate = result.poses[1].pose
    assert not result.poses[1].flagged
    assert np.allclose(estimate.translation, motion.translation, atol=1e-2)
    angle = np.degrees(np.linalg.norm(log_matrix(estimate.rotation.T @ motion.rotation)))
    assert angle < 0.2
    assert result.relative(0).translation == pytest.approx(estimate.translation)


def test_plane_icp_needs_scans() -> None:
    with pytest.raises(InsufficientDataError):
        plane_icp_odometry([], OdometryConfig())


def test_perturbed_reference_is_anchored_and_seeded() -> None:
    reference = [
        RigidTransform(exp_matrix(np.array([0.0, 0.0, 0.1 * k])), np.array([k * 0.2, 1.0, 0.0]))
        for k in range(4)
    ]
    config = OdometryConfig(mode="ground-truth-perturbed", seed=3)
    first = perturbed_reference_odometry([0.0, 0.1, 0.2, 0.3], reference, config)
    second = perturbed_reference_odometry([0.0, 0.1, 0.2, 0.3], reference, config)
    assert np.allclose(first.poses[0].rotation, np.eye(3))
    assert np.allclose(first.poses[0].translation, 0.0)
    pairs = zip(first.poses, second.poses, strict=True)
    assert all(np.allclose(a.translation, b.translation) for a, b in pairs)


def test_noise_free_reference_reproduces_relative_motion() -> None:
    reference = [RigidTransform.identity(), _motion()]
    config = OdometryConfig(mode="ground-truth-perturbed", rotation_sigma_deg=0.0, translation_sigma=0.0)
    result = perturbed_reference_odometry([0.0, 0.1], reference, config)
    assert np.allclose(result.relative(0).as_matrix(), _motion().as_matrix())


def test_reference_length_must_match() -> None:
    config = OdometryConfig(mode="ground-truth-perturbed")
    with pytest.raises(InvalidArgumentError):
        perturbed_reference_odometry([0.0, 0.1], [RigidTransform.identity()], config)


def test_reference_mode_needs_poses() -> None:
    scans = [LidarScan(0.0, np.zeros(0), points=np.zeros((0, 3)))]
    config = OdometryConfig(mode="ground-truth-perturbed")
    with pytest.raises(InvalidArgumentError):
        simple_odometry(scans, LidarIntrinsics.nominal([0.0]), config)


def test_derotation_is_identity_for_static_rotation() -> None:
    spline = TrajectorySpline.from_constant(0.0, 0.05, 8)
    points = np.array([[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]])
    moved = derotate_points(points, np.array([0.1, 0.2]), 0.05, spline, exp_matrix(np.array([0.1, 0.2, 0.3])))
    assert np.allclose(moved, points)
