"""Scan-to-map LiDAR odometry used to seed the initializer.

Two modes are available: ``plane-icp`` registers each scan against a growing
keyframe map with point-to-plane Gauss-Newton, and ``ground-truth-perturbed``
derives poses from reference poses with seeded noise (simulation only).
Poses are map-from-LiDAR at each scan's start time; the first pose is identity.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from licalib.config import OdometryConfig
from licalib.errors import InsufficientDataError, InvalidArgumentError
from licalib.geometry import FloatArray, RigidTransform, exp_matrix, log_matrix, skew
from licalib.sensors import LidarIntrinsics, LidarScan, project_raw
from licalib.spline import TrajectorySpline

logger = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 30


@dataclass(slots=True)
class OdometryPose:
    scan_index: int
    time: float
    pose: RigidTransform
    rms: float = 0.0
    flagged: bool = False
    keyframe: bool = False

    @property
    def rotation(self) -> FloatArray:
        return self.pose.rotation

    @property
    def translation(self) -> FloatArray:
        return self.pose.translation


@dataclass
class OdometryResult:
    mode: str
    poses: list[OdometryPose] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def flagged(self) -> list[int]:
        return [pose.scan_index for pose in self.poses if pose.flagged]

    def relative(self, k: int) -> RigidTransform:
        """Motion from pose ``k`` to pose ``k + 1`` expressed in the frame of pose ``k``."""

        return self.poses[k].pose.inverse().compose(self.poses[k + 1].pose)


def scan_points(
    scan: LidarScan, intrinsics: LidarIntrinsics, min_range: float = 0.0
) -> tuple[FloatArray, FloatArray]:
    """LiDAR-frame points and their stamps, dropping returns at or below ``min_range``."""

    if scan.is_raw:
        keep = scan.ranges > min_range
        points = project_raw(scan.beams[keep], scan.ranges[keep], scan.azimuths[keep], intrinsics)
        return points, scan.times[keep]
    keep = np.linalg.norm(scan.points, axis=1) > min_range
    return scan.points[keep], scan.times[keep]


def derotate_points(
    points: FloatArray,
    times: FloatArray,
    reference_time: float,
    rotation_spline: TrajectorySpline,
    extrinsic_rotation: FloatArray,
    time_offset: float = 0.0,
) -> FloatArray:
    """Rotate every point into the LiDAR frame at ``reference_time`` (translation is ignored)."""

    lo, hi = rotation_spline.t_min, rotation_spline.t_max
    t_point = np.clip(times + time_offset, lo, hi)
    t_ref = float(np.clip(reference_time + time_offset, lo, hi))
    ref = rotation_spline.eval_rotation_matrix(t_ref) @ extrinsic_rotation
    current = rotation_spline.eval_rotation_matrix(t_point) @ extrinsic_rotation
    relative = np.einsum("ba,nbc->nac", ref, current)
    return np.einsum("nab,nb->na", relative, points)


def voxel_downsample(points: FloatArray, voxel: float) -> FloatArray:
    """Centroid of the points falling in each voxel."""

    if len(points) == 0:
        return points
    keys = np.floor(points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, points)
    return sums / counts[:, None]


def estimate_normals(points: FloatArray, tree: cKDTree, neighbors: int) -> tuple[FloatArray, FloatArray]:
    """PCA normals and planarity ``(l1 - l0) / l2`` from the ``neighbors`` nearest points."""

    k = min(neighbors, len(points))
    _, idx = tree.query(points, k=k)
    local = points[idx.reshape(len(points), k)]
    centered = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nka,nkb->nab", centered, centered) / k
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    top = np.where(eigenvalues[:, 2] > 0.0, eigenvalues[:, 2], 1.0)
    return eigenvectors[:, :, 0], (eigenvalues[:, 1] - eigenvalues[:, 0]) / top


@dataclass
class _PlaneMap:
    points: FloatArray
    normals: FloatArray
    tree: cKDTree

    @classmethod
    def build(cls, points: FloatArray, neighbors: int, voxel: float) -> _PlaneMap:
        reduced = voxel_downsample(points, voxel)
        tree = cKDTree(reduced)
        normals, planarity = estimate_normals(reduced, tree, neighbors)
        keep = planarity > 0.3
        reduced, normals = reduced[keep], normals[keep]
        return cls(reduced, normals, cKDTree(reduced))


def register_point_to_plane(
    source: FloatArray,
    target: _PlaneMap,
    initial: RigidTransform,
    max_correspondence: float,
    max_iterations: int,
) -> tuple[RigidTransform, float, int]:
    """Gauss-Newton on SE(3) minimizing point-to-plane distances; returns pose, RMS and inlier count."""

    rotation, translation = initial.rotation.copy(), initial.translation.copy()
    rms, inliers = np.inf, 0
    for _ in range(max_iterations):
        moved = source @ rotation.T + translation
        dist, idx = target.tree.query(moved, distance_upper_bound=max_correspondence)
        valid = np.isfinite(dist)
        inliers = int(valid.sum())
        if inliers < MIN_CORRESPONDENCES:
            break
        normals = target.normals[idx[valid]]
        residual = np.einsum("na,na->n", normals, moved[valid] - target.points[idx[valid]])
        rms = float(np.sqrt(np.mean(residual**2)))
        jac = np.empty((inliers, 6))
        jac[:, :3] = -np.einsum("na,ab,nbc->nc", normals, rotation, skew(source[valid]))
        jac[:, 3:] = normals
        step = np.linalg.lstsq(jac.T @ jac, -jac.T @ residual, rcond=None)[0]
        rotation = rotation @ exp_matrix(step[:3])
        translation = translation + step[3:]
        if np.linalg.norm(step) < 1e-6:
            break
    return RigidTransform(rotation, translation), rms, inliers


def _needs_keyframe(pose: RigidTransform, last: RigidTransform, config: OdometryConfig) -> bool:
    delta = last.inverse().compose(pose)
    angle = float(np.degrees(np.linalg.norm(log_matrix(delta.rotation))))
    moved = float(np.linalg.norm(delta.translation)) > config.keyframe_translation
    return moved or angle > config.keyframe_rotation_deg


def plane_icp_odometry(clouds: Sequence[tuple[float, FloatArray]], config: OdometryConfig) -> OdometryResult:
    """Register ``(start_time, lidar_points)`` clouds to a keyframe map with a constant-velocity prior."""

    if not clouds:
        raise InsufficientDataError("odometry needs at least one scan")
    result = OdometryResult("plane-icp")
    first_time, first_points = clouds[0]
    map_points = [first_points]
    plane_map = _PlaneMap.build(first_points, config.normal_neighbors, config.voxel_size)
    result.poses.append(OdometryPose(0, first_time, RigidTransform.identity(), keyframe=True))
    last_key = RigidTransform.identity()

    for k in range(1, len(clouds)):
        start, points = clouds[k]
        prev = result.poses[-1].pose
        guess = prev
        if len(result.poses) > 1:
            guess = prev.compose(result.poses[-2].pose.inverse().compose(prev))
        source = voxel_downsample(points, config.voxel_size)
        pose, rms, inliers = register_point_to_plane(
            source, plane_map, guess, config.max_correspondence, config.max_iterations
        )
        flagged = inliers < MIN_CORRESPONDENCES or rms > config.divergence_rms
        if flagged:
            logger.warning("odometry scan %d diverged (rms %.4f, %d inliers); keeping prior", k, rms, inliers)
            pose = guess
        keyframe = not flagged and _needs_keyframe(pose, last_key, config)
        if keyframe:
            map_points.append(pose.apply(points))
            plane_map = _PlaneMap.build(np.vstack(map_points), config.normal_neighbors, config.voxel_size)
            last_key = pose
        result.poses.append(OdometryPose(k, start, pose, rms, flagged, keyframe))
    logger.info("plane-icp odometry: %d scans, %d flagged", len(result), len(result.flagged))
    return result


def perturbed_reference_odometry(
    starts: Sequence[float], reference: Sequence[RigidTransform], config: OdometryConfig
) -> OdometryResult:
    """Reference world-from-LiDAR poses re-anchored at the first scan and perturbed with seeded noise."""

    if len(starts) != len(reference):
        raise InvalidArgumentError("one reference pose per scan is required")
    if not reference:
        raise InsufficientDataError("odometry needs at least one scan")
    rng = np.random.default_rng(config.seed)
    origin = reference[0].inverse()
    result = OdometryResult("ground-truth-perturbed")
    for k, (start, pose) in enumerate(zip(starts, reference, strict=True)):
        relative = origin.compose(pose)
        if k > 0:
            rot_noise = rng.normal(0.0, np.radians(config.rotation_sigma_deg), 3)
            trans_noise = rng.normal(0.0, config.translation_sigma, 3)
            relative = RigidTransform(
                relative.rotation @ exp_matrix(rot_noise), relative.translation + trans_noise
            )
        result.poses.append(OdometryPose(k, float(start), relative, keyframe=k == 0))
    return result


def simple_odometry(
    scans: Sequence[LidarScan],
    intrinsics: LidarIntrinsics,
    config: OdometryConfig,
    min_range: float = 0.0,
    rotation_spline: TrajectorySpline | None = None,
    extrinsic_rotation: FloatArray | None = None,
    reference: Sequence[RigidTransform] | None = None,
) -> OdometryResult:
    """Dispatch to the configured odometry mode.

    When ``rotation_spline`` and ``extrinsic_rotation`` are given, points are
    de-rotated to their scan start before registration.
    """

    starts = [scan.start_time for scan in scans]
    if config.mode == "ground-truth-perturbed":
        if reference is None:
            raise InvalidArgumentError("ground-truth-perturbed odometry needs reference poses")
        return perturbed_reference_odometry(starts, reference, config)
    clouds = []
    for scan in scans:
        points, times = scan_points(scan, intrinsics, min_range)
        if rotation_spline is not None and extrinsic_rotation is not None and len(points):
            points = derotate_points(points, times, scan.start_time, rotation_spline, extrinsic_rotation)
        clouds.append((scan.start_time, points))
    return plane_icp_odometry(clouds, config)
