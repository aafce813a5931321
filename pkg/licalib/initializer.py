"""Initial guess for the batch refinement.

The rotation spline is fitted to gyro readings, the extrinsic rotation is
recovered from paired IMU/LiDAR relative rotations, and the translation
spline is a sparse least-squares fit to odometry positions.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike
from scipy import sparse
from scipy.sparse import linalg as sparse_linalg

from licalib.config import RunConfig
from licalib.errors import DegenerateRotationError, InsufficientDataError, InvalidArgumentError
from licalib.estimation.residuals import ImuSigmas, block_cost, gyro_block
from licalib.estimation.solver import (
    DampingOptions,
    NormalSystem,
    assemble_normal_system,
    levenberg_marquardt,
)
from licalib.estimation.state import ActiveBlocks, CalibState, StateLayout, apply_update
from licalib.geometry import (
    IDENTITY_QUAT,
    FloatArray,
    RigidTransform,
    exp_matrix,
    log_matrix,
    matrix_to_quat,
    quat_canonical,
    quat_mul_matrices,
    quat_to_matrix,
)
from licalib.odometry import OdometryResult, simple_odometry
from licalib.sensors import Extrinsics, ImuIntrinsics, ImuNavState, ImuStream, LidarIntrinsics, LidarScan
from licalib.spline import TrajectorySpline

logger = logging.getLogger(__name__)

DEGENERACY_RATIO = 1e-3


def damping_options(config: RunConfig) -> DampingOptions:
    solver = config.solver
    return DampingOptions(
        initial_ratio=solver.initial_damping_ratio,
        increase=solver.damping_increase,
        decrease=solver.damping_decrease,
        max_ratio=solver.max_damping_ratio,
    )


# -- rotation spline -----------------------------------------------------------------


def integrate_gyro(imu: ImuStream) -> FloatArray:
    """Orientations obtained by chaining ``Exp(w dt)``; the first sample is identity."""

    rotations = np.empty((len(imu), 3, 3))
    rotations[0] = np.eye(3)
    if len(imu) < 2:
        return rotations
    steps = exp_matrix(imu.gyro[:-1] * np.diff(imu.times)[:, None])
    for k, step in enumerate(steps):
        rotations[k + 1] = rotations[k] @ step
    return rotations


@dataclass
class _GyroFit:
    imu: ImuStream
    sigma: float
    layout: StateLayout

    def linearize(self, state: CalibState) -> NormalSystem:
        block = gyro_block(state.trajectory, state.nav, state.imu, self.imu, self.sigma, self.layout)
        return assemble_normal_system([block], self.layout.size)

    def cost(self, state: CalibState) -> float:
        return block_cost(gyro_block(state.trajectory, state.nav, state.imu, self.imu, self.sigma))

    def retract(self, state: CalibState, step: FloatArray) -> CalibState:
        return apply_update(state, self.layout, step)


def init_rotation_spline(
    imu: ImuStream,
    t_start: float,
    t_end: float,
    knot_spacing: float,
    sigma: float,
    iterations: int = 5,
    options: DampingOptions | None = None,
) -> TrajectorySpline:
    """Rotation-only spline over ``[t_start, t_end]``: gyro integration, then LM on gyro residuals."""

    spline = TrajectorySpline.covering(t_start, t_end, knot_spacing)
    inside = spline.contains(imu.times)
    samples = imu.select(inside)
    if len(samples) < 2:
        raise InsufficientDataError("rotation initialization needs IMU samples inside the window")
    rotations = integrate_gyro(samples)
    knot_times = spline.t0 + (np.arange(spline.num_knots) - 1) * spline.dt
    nearest = np.clip(np.searchsorted(samples.times, knot_times), 0, len(samples) - 1)
    quats = matrix_to_quat(rotations[nearest])
    quats[0] = IDENTITY_QUAT
    spline = TrajectorySpline(spline.t0, spline.dt, spline.positions, quats)

    nominal = LidarIntrinsics.nominal([0.0])
    state = CalibState.single(spline, ImuNavState(), ImuIntrinsics(), nominal, Extrinsics())
    layout = StateLayout.build(state, ActiveBlocks.rotations_only())
    result = levenberg_marquardt(_GyroFit(samples, sigma, layout), state, iterations, options)
    logger.info(
        "rotation spline: %d knots, gyro cost %.4g after %d iterations",
        spline.num_knots,
        result.cost,
        result.iterations,
    )
    return result.state.trajectory


# -- extrinsic rotation --------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class RotationPair:
    """Relative IMU and LiDAR rotations between two consecutive scan starts."""

    imu: FloatArray
    lidar: FloatArray
    angle_deg: float


def rotation_pairs(
    odometry: OdometryResult,
    rotation_spline: TrajectorySpline,
    min_angle_deg: float = 0.5,
    time_offset: float = 0.0,
) -> list[RotationPair]:
    """Pairs from consecutive unflagged odometry poses whose rotations both exceed ``min_angle_deg``."""

    pairs = []
    for k in range(len(odometry) - 1):
        first, second = odometry.poses[k], odometry.poses[k + 1]
        if first.flagged or second.flagged:
            continue
        times = np.array([first.time, second.time]) + time_offset
        if not np.all(rotation_spline.contains(times)):
            continue
        r0, r1 = rotation_spline.eval_rotation_matrix(times)
        imu_rel = r0.T @ r1
        lidar_rel = odometry.relative(k).rotation
        imu_angle = np.degrees(np.linalg.norm(log_matrix(imu_rel)))
        lidar_angle = np.degrees(np.linalg.norm(log_matrix(lidar_rel)))
        if min(imu_angle, lidar_angle) < min_angle_deg:
            continue
        pairs.append(RotationPair(matrix_to_quat(imu_rel), matrix_to_quat(lidar_rel), float(imu_angle)))
    return pairs


def init_extrinsic_rotation(pairs: Sequence[RotationPair]) -> tuple[FloatArray, float]:
    """Solve ``q_I * q = q * q_L`` over all pairs; returns the quaternion and the degeneracy ratio.

    The ratio is the second-smallest over the largest singular value of the
    stacked ``L(q_I) - R(q_L)`` system.
    """

    if len(pairs) < 2:
        raise InsufficientDataError(f"hand-eye rotation needs at least 2 informative pairs, got {len(pairs)}")
    rows = []
    for pair in pairs:
        left, _ = quat_mul_matrices(quat_canonical(pair.imu))
        _, right = quat_mul_matrices(quat_canonical(pair.lidar))
        rows.append(left - right)
    _, sigma, vt = np.linalg.svd(np.vstack(rows))
    ratio = float(sigma[-2] / sigma[0]) if sigma[0] > 0.0 else 0.0
    if ratio < DEGENERACY_RATIO:
        raise DegenerateRotationError(
            f"rotation pairs do not constrain the extrinsic rotation "
            f"(ratio {ratio:.2e} < {DEGENERACY_RATIO:.0e})"
        )
    quat = quat_canonical(vt[-1] / np.linalg.norm(vt[-1]))
    return quat, ratio


# -- translation spline and gravity --------------------------------------------------


def init_translation_spline(
    rotation_spline: TrajectorySpline,
    odometry: OdometryResult,
    extrinsic_rotation: FloatArray,
    translation_guess: ArrayLike | None = None,
    ridge: float = 1e-6,
    smoothness: float = 1e-3,
    time_offset: float = 0.0,
) -> TrajectorySpline:
    """Fit translation knots to odometry positions with the extrinsic translation held at a guess.

    Each pose ``k`` gives ``(B(t_k) - B(t_0)) P = R(t_0) R_IL p_k - (R(t_k) - R(t_0)) p_IL``.
    Knot 0 is held at zero and ``p_IL`` defaults to zero.
    """

    guess = np.zeros(3) if translation_guess is None else np.asarray(translation_guess, dtype=float)
    if guess.shape != (3,):
        raise InvalidArgumentError(f"translation guess must have three components, got shape {guess.shape}")
    poses = [pose for pose in odometry.poses if not pose.flagged]
    times = np.array([pose.time for pose in poses]) + time_offset
    inside = rotation_spline.contains(times)
    poses = [pose for pose, ok in zip(poses, inside, strict=True) if ok]
    times = times[inside]
    if len(poses) < 2:
        raise InsufficientDataError("translation initialization needs at least two odometry poses")
    n = rotation_spline.num_knots
    design = rotation_spline.position_design(times).toarray()
    weights = design[:, 1:] - design[0, 1:]
    rotations = rotation_spline.eval_rotation_matrix(times)
    levers = np.einsum("nab,b->na", rotations - rotations[0], guess)
    lidar_translations = np.array([pose.translation for pose in poses])
    rhs = (np.einsum("ab,nb->na", rotations[0] @ extrinsic_rotation, lidar_translations) - levers).ravel()
    data = sparse.kron(sparse.csr_matrix(weights), sparse.eye(3)).tocsr()

    free = n - 1
    second = sparse.diags([1.0, -2.0, 1.0], [0, 1, 2], shape=(max(n - 2, 0), n)).tocsr()[:, 1:]
    smooth = sparse.kron(second, sparse.eye(3)).tocsr()
    normal = data.T @ data + smoothness * (smooth.T @ smooth) + ridge * sparse.eye(data.shape[1])
    solution = sparse_linalg.spsolve(normal.tocsc(), data.T @ rhs)
    positions = np.vstack([np.zeros(3), np.asarray(solution).reshape(free, 3)])
    return TrajectorySpline(rotation_spline.t0, rotation_spline.dt, positions, rotation_spline.quaternions)


def init_gravity(trajectory: TrajectorySpline, imu: ImuStream, gravity_norm: float = 9.8) -> FloatArray:
    """Mean of ``p'' - R a_m`` over the in-domain samples, rescaled to ``gravity_norm``."""

    samples = imu.select(trajectory.contains(imu.times))
    if len(samples) == 0:
        raise InsufficientDataError("gravity initialization needs IMU samples inside the trajectory domain")
    rotations = trajectory.eval_rotation_matrix(samples.times)
    accel = trajectory.eval_derivatives(samples.times, 2)
    estimate = np.mean(accel - np.einsum("nab,nb->na", rotations, samples.accel), axis=0)
    norm = np.linalg.norm(estimate)
    if norm == 0.0:
        raise InsufficientDataError("gravity estimate vanished")
    return estimate / norm * gravity_norm


def perturb_extrinsics(
    extrinsics: Extrinsics, rotation_deg: float, translation_m: float, seed: int
) -> Extrinsics:
    """Rotate by a random axis through ``rotation_deg`` and shift by ``translation_m`` along a random axis."""

    if rotation_deg == 0.0 and translation_m == 0.0:
        return extrinsics.copy()
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    shift = rng.normal(size=3)
    shift /= np.linalg.norm(shift)
    rotation = quat_to_matrix(extrinsics.rotation) @ exp_matrix(np.radians(rotation_deg) * axis)
    translation = extrinsics.translation + translation_m * shift
    return Extrinsics(matrix_to_quat(rotation), translation, extrinsics.time_offset)


# -- full initialization -------------------------------------------------------------


@dataclass
class InitResult:
    state: CalibState
    odometry: OdometryResult
    pairs: list[RotationPair]
    degeneracy_ratio: float
    warnings: list[str] = field(default_factory=list)


def _extrinsic_rotation(
    odometry: OdometryResult, rotation_spline: TrajectorySpline, min_angle_deg: float
) -> tuple[FloatArray, list[RotationPair], float]:
    pairs = rotation_pairs(odometry, rotation_spline, min_angle_deg)
    quat, ratio = init_extrinsic_rotation(pairs)
    logger.info("hand-eye rotation from %d pairs (ratio %.3g)", len(pairs), ratio)
    return quat, pairs, ratio


def initialize_state(
    imu: ImuStream,
    scans: Sequence[LidarScan],
    config: RunConfig,
    lidar_intrinsics: LidarIntrinsics,
    t_start: float,
    t_end: float,
    reference: Sequence[RigidTransform] | None = None,
) -> InitResult:
    """Build the initial single-segment state over ``[t_start, t_end]``."""

    sigmas = ImuSigmas.from_densities(
        config.imu.gyro_noise_density, config.imu.accel_noise_density, config.imu.rate_hz
    )
    options = damping_options(config)
    rotation = init_rotation_spline(
        imu, t_start, t_end, config.trajectory.knot_spacing, sigmas.gyro, options=options
    )
    odometry = simple_odometry(
        scans, lidar_intrinsics, config.odometry, config.lidar.min_range, reference=reference
    )
    min_angle = config.solver.rotation_pair_min_angle_deg
    quat, pairs, ratio = _extrinsic_rotation(odometry, rotation, min_angle)
    warnings: list[str] = []
    if config.odometry.mode == "plane-icp" and config.odometry.two_pass:
        odometry = simple_odometry(
            scans,
            lidar_intrinsics,
            config.odometry,
            config.lidar.min_range,
            rotation_spline=rotation,
            extrinsic_rotation=quat_to_matrix(quat),
        )
        quat, pairs, ratio = _extrinsic_rotation(odometry, rotation, min_angle)
    if odometry.flagged:
        warnings.append(f"odometry flagged {len(odometry.flagged)} scans as diverged")

    translation = np.asarray(config.solver.initial_translation, dtype=float)
    trajectory = init_translation_spline(
        rotation,
        odometry,
        quat_to_matrix(quat),
        translation,
        ridge=config.solver.translation_ridge,
        smoothness=config.solver.translation_smoothness,
    )
    nav = ImuNavState(
        init_gravity(trajectory, imu, config.imu.gravity_norm),
        gravity_norm=config.imu.gravity_norm,
    )
    extrinsics = Extrinsics(quat, translation, 0.0)
    perturbation = config.solver.initial_extrinsic_perturbation
    extrinsics = perturb_extrinsics(
        extrinsics, perturbation.rotation_deg, perturbation.translation_m, perturbation.seed
    )
    state = CalibState.single(trajectory, nav, ImuIntrinsics(), lidar_intrinsics.copy(), extrinsics)
    logger.info(
        "initial extrinsics: rotation %s translation %s",
        np.array2string(extrinsics.rotation, precision=5),
        np.array2string(extrinsics.translation, precision=4),
    )
    return InitResult(state, odometry, pairs, ratio, warnings)
