"""Ground-truth motion, plane-room scene and noisy IMU/LiDAR measurement synthesis."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from numpy.typing import ArrayLike

from licalib.config import RunConfig, SimulationConfig
from licalib.errors import DomainError, InvalidArgumentError
from licalib.geometry import FloatArray, euler_to_matrix, matrix_to_quat
from licalib.sensors import (
    GRAVITY_NORM,
    Extrinsics,
    ImuIntrinsics,
    ImuNavState,
    ImuStream,
    LidarBeamIntrinsics,
    LidarIntrinsics,
    LidarScan,
    RawLidarPoint,
)
from licalib.spline import TrajectorySpline

logger = logging.getLogger(__name__)

WORLD_GRAVITY = np.array([0.0, 0.0, -GRAVITY_NORM])
MOUNTING_ROTATIONS = {
    "A": np.eye(3),
    "B": euler_to_matrix(0.0, np.radians(-30.0), 0.0),
    "C": euler_to_matrix(0.0, np.radians(-30.0), 0.0) @ euler_to_matrix(np.radians(30.0), 0.0, 0.0),
}


@dataclass(slots=True)
class Kinematics:
    """IMU-frame kinematics at a batch of times; ``rotation`` is world-from-IMU."""

    position: FloatArray
    velocity: FloatArray
    acceleration: FloatArray
    rotation: FloatArray
    omega: FloatArray

    def body_acceleration(self, gravity: FloatArray = WORLD_GRAVITY) -> FloatArray:
        return np.einsum("nba,nb->na", self.rotation, self.acceleration - gravity)


class Motion(Protocol):
    t_min: float
    t_max: float

    def kinematics(self, t: ArrayLike) -> Kinematics: ...


# -- analytic trajectories -----------------------------------------------------------


def _smoothstep(x: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
    """C2 quintic step clipped to [0, 1] with its first two derivatives in ``x``."""

    inside = (x > 0.0) & (x < 1.0)
    xc = np.clip(x, 0.0, 1.0)
    value = xc**3 * (10.0 - 15.0 * xc + 6.0 * xc**2)
    first = np.where(inside, 30.0 * xc**2 * (1.0 - xc) ** 2, 0.0)
    second = np.where(inside, 60.0 * xc * (1.0 - xc) * (1.0 - 2.0 * xc), 0.0)
    return value, first, second


def excitation_envelope(
    t: ArrayLike, segment_length: float, blend_time: float
) -> tuple[FloatArray, FloatArray, FloatArray]:
    """1 on even (excited) segments, 0 on odd (planar) ones, C2-blended across boundaries."""

    times = np.atleast_1d(np.asarray(t, dtype=float))
    half = max(blend_time, 1e-9) / 2.0
    width = 2.0 * half
    value = np.zeros_like(times)
    first = np.zeros_like(times)
    second = np.zeros_like(times)
    last = int(np.floor(times.max() / segment_length)) + 1 if times.size else 0
    for k in range(0, last + 1, 2):
        start, end = k * segment_length, (k + 1) * segment_length
        if k == 0:
            rise, rise_d, rise_dd = np.ones_like(times), np.zeros_like(times), np.zeros_like(times)
        else:
            rise, rise_d, rise_dd = _smoothstep((times - start + half) / width)
            rise_d, rise_dd = rise_d / width, rise_dd / width**2
        fall, fall_d, fall_dd = _smoothstep((times - end + half) / width)
        fall, fall_d, fall_dd = 1.0 - fall, -fall_d / width, -fall_dd / width**2
        value += rise * fall
        first += rise_d * fall + rise * fall_d
        second += rise_dd * fall + 2.0 * rise_d * fall_d + rise * fall_dd
    return value, first, second


def euler_rates_to_body(angles: FloatArray, rates: FloatArray) -> FloatArray:
    """Body angular velocity of ``R = Rz(yaw) Ry(pitch) Rx(roll)`` from Euler angle rates."""

    rx, ry = angles[:, 0], angles[:, 1]
    drx, dry, drz = rates[:, 0], rates[:, 1], rates[:, 2]
    return np.column_stack(
        [
            drx - drz * np.sin(ry),
            dry * np.cos(rx) + drz * np.sin(rx) * np.cos(ry),
            -dry * np.sin(rx) + drz * np.cos(rx) * np.cos(ry),
        ]
    )


@dataclass(frozen=True)
class AnalyticTrajectory:
    """Closed-form robot motion; the IMU is mounted with ``mounting`` (robot-from-IMU rotation)."""

    kind: str
    duration: float
    mounting: FloatArray = field(default_factory=lambda: np.eye(3))
    segment_length: float = 15.0
    blend_time: float = 1.5

    def __post_init__(self) -> None:
        if self.kind not in ("sinusoidal", "figure8", "alternating"):
            raise InvalidArgumentError(f"unknown trajectory kind {self.kind!r}")

    @property
    def t_min(self) -> float:
        return 0.0

    @property
    def t_max(self) -> float:
        return self.duration

    @property
    def planar(self) -> bool:
        """True when roll and pitch stay zero and height is constant (yaw-only planar motion)."""

        return self.kind == "figure8"

    def _check(self, times: FloatArray) -> None:
        if np.any(times < self.t_min - 1e-9) or np.any(times > self.t_max + 1e-9):
            raise DomainError("trajectory queried outside its duration", self.t_min, self.t_max)

    def robot_state(self, t: ArrayLike) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray, FloatArray]:
        """Position, velocity, acceleration, Euler angles and Euler rates of the robot."""

        times = np.atleast_1d(np.asarray(t, dtype=float))
        self._check(times)
        w = np.pi / 5.0
        c, s = np.cos(w * times), np.sin(w * times)
        zero = np.zeros_like(times)
        if self.kind == "figure8":
            pos = np.column_stack([2.0 * c, 1.5 * s * c + 5.0, np.full_like(times, 2.0)])
            c2, s2 = np.cos(2 * w * times), np.sin(2 * w * times)
            vel = np.column_stack([-2.0 * w * s, 0.75 * 2 * w * c2, zero])
            acc = np.column_stack([-2.0 * w**2 * c, -0.75 * (2 * w) ** 2 * s2, zero])
            angles = np.column_stack([zero, zero, 0.4 * np.sin(times)])
            rates = np.column_stack([zero, zero, 0.4 * np.cos(times)])
            return pos, vel, acc, angles, rates

        w4 = 4.0 * w
        c4, s4 = np.cos(w4 * times), np.sin(w4 * times)
        if self.kind == "alternating":
            env, env_d, env_dd = excitation_envelope(times, self.segment_length, self.blend_time)
        else:
            env, env_d, env_dd = np.ones_like(times), zero, zero
        bump, bump_d, bump_dd = 0.8 * c4, -0.8 * w4 * s4, -0.8 * w4**2 * c4
        pos = np.column_stack([2.0 * c + 5.0, 1.5 * s + 5.0, 5.0 + env * bump])
        vel = np.column_stack([-2.0 * w * s, 1.5 * w * c, env_d * bump + env * bump_d])
        acc = np.column_stack(
            [-2.0 * w**2 * c, -1.5 * w**2 * s, env_dd * bump + 2.0 * env_d * bump_d + env * bump_dd]
        )
        roll, roll_d = 0.4 * np.cos(times), -0.4 * np.sin(times)
        pitch, pitch_d = 0.6 * np.sin(times), 0.6 * np.cos(times)
        angles = np.column_stack([env * roll, env * pitch, 0.7 * times])
        rates = np.column_stack(
            [env_d * roll + env * roll_d, env_d * pitch + env * pitch_d, np.full_like(times, 0.7)]
        )
        return pos, vel, acc, angles, rates

    def robot_rotation(self, angles: FloatArray) -> FloatArray:
        return np.stack([euler_to_matrix(*row) for row in angles])

    def kinematics(self, t: ArrayLike) -> Kinematics:
        pos, vel, acc, angles, rates = self.robot_state(t)
        robot = self.robot_rotation(angles)
        omega_robot = euler_rates_to_body(angles, rates)
        return Kinematics(
            position=pos,
            velocity=vel,
            acceleration=acc,
            rotation=robot @ self.mounting,
            omega=omega_robot @ self.mounting,
        )


def sinusoidal_trajectory(duration: float = 10.0, mounting: str = "A") -> AnalyticTrajectory:
    return AnalyticTrajectory("sinusoidal", duration, mounting_case(mounting))


def figure8_trajectory(duration: float = 10.0, mounting: str = "A") -> AnalyticTrajectory:
    return AnalyticTrajectory("figure8", duration, mounting_case(mounting))


def alternating_trajectory(
    duration: float = 120.0, segment_length: float = 15.0, blend_time: float = 1.5, mounting: str = "A"
) -> AnalyticTrajectory:
    """Fully excited and planar segments alternating every ``segment_length`` seconds."""

    return AnalyticTrajectory("alternating", duration, mounting_case(mounting), segment_length, blend_time)


def mounting_case(case: str) -> FloatArray:
    """Robot-from-IMU rotation of mounting case ``A``, ``B`` or ``C``."""

    try:
        return MOUNTING_ROTATIONS[case].copy()
    except KeyError as exc:
        raise InvalidArgumentError(f"unknown mounting case {case!r}") from exc


def unobservable_direction(case: str) -> FloatArray:
    """Extrinsic ``[rotation, translation]`` direction left free by planar yaw-only motion."""

    vertical = mounting_case(case).T @ np.array([0.0, 0.0, 1.0])
    return np.concatenate([np.zeros(3), vertical])


@dataclass(frozen=True)
class SplineMotion:
    """Motion read off a :class:`TrajectorySpline`; used for spline-representable oracles."""

    spline: TrajectorySpline

    @property
    def t_min(self) -> float:
        return self.spline.t_min

    @property
    def t_max(self) -> float:
        return self.spline.t_max

    def kinematics(self, t: ArrayLike) -> Kinematics:
        times = np.atleast_1d(np.asarray(t, dtype=float))
        kin = self.spline.rotation_kinematics(times)
        return Kinematics(
            position=self.spline.eval_derivatives(times, 0),
            velocity=self.spline.eval_derivatives(times, 1),
            acceleration=self.spline.eval_derivatives(times, 2),
            rotation=kin.rotation,
            omega=kin.omega,
        )


# -- scene ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundedPlane:
    """Rectangle with unit ``normal``, ``center`` and half extents along ``axes`` rows."""

    normal: FloatArray
    center: FloatArray
    axes: FloatArray
    half_extents: FloatArray

    @property
    def offset(self) -> float:
        return -float(self.normal @ self.center)

    @classmethod
    def from_center(cls, center: ArrayLike, normal: ArrayLike, width: float, height: float) -> BoundedPlane:
        n = np.asarray(normal, dtype=float)
        n = n / np.linalg.norm(n)
        helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = np.cross(n, helper)
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        return cls(n, np.asarray(center, dtype=float), np.vstack([u, v]), np.array([width, height]) / 2.0)


@dataclass(frozen=True)
class PlaneScene:
    planes: tuple[BoundedPlane, ...]

    def __len__(self) -> int:
        return len(self.planes)

    def cast(self, origins: FloatArray, directions: FloatArray, min_range: float = 0.0):
        """Nearest hit distance and plane index per ray; ``inf`` / ``-1`` where nothing is hit."""

        best = np.full(len(origins), np.inf)
        index = np.full(len(origins), -1)
        for k, plane in enumerate(self.planes):
            denom = directions @ plane.normal
            with np.errstate(divide="ignore", invalid="ignore"):
                dist = -(origins @ plane.normal + plane.offset) / denom
            hit_points = origins + dist[:, None] * directions
            local = np.abs((hit_points - plane.center) @ plane.axes.T)
            valid = (
                (np.abs(denom) > 1e-9)
                & (dist > min_range)
                & np.all(local <= plane.half_extents + 1e-9, axis=1)
                & (dist < best)
            )
            best[valid] = dist[valid]
            index[valid] = k
        return best, index


def default_room() -> PlaneScene:
    """12 x 10 x 10 m room (x in [-4, 8], y and z in [0, 10]) with slanted panels."""

    walls = [
        BoundedPlane.from_center([-4.0, 5.0, 5.0], [1.0, 0.0, 0.0], 10.0, 10.0),
        BoundedPlane.from_center([8.0, 5.0, 5.0], [-1.0, 0.0, 0.0], 10.0, 10.0),
        BoundedPlane.from_center([2.0, 0.0, 5.0], [0.0, 1.0, 0.0], 12.0, 10.0),
        BoundedPlane.from_center([2.0, 10.0, 5.0], [0.0, -1.0, 0.0], 12.0, 10.0),
        BoundedPlane.from_center([2.0, 5.0, 0.0], [0.0, 0.0, 1.0], 12.0, 10.0),
        BoundedPlane.from_center([2.0, 5.0, 10.0], [0.0, 0.0, -1.0], 12.0, 10.0),
    ]
    panels = [
        BoundedPlane.from_center([-3.0, 1.0, 6.0], [1.0, 1.0, 0.0], 2.5, 4.0),
        BoundedPlane.from_center([7.0, 9.0, 3.0], [-1.0, -1.0, 1.0], 2.5, 2.5),
        BoundedPlane.from_center([-3.0, 9.0, 8.5], [1.0, -1.0, -1.0], 2.5, 2.5),
        BoundedPlane.from_center([2.0, 0.8, 8.5], [0.0, 1.0, -1.0], 4.0, 2.0),
        BoundedPlane.from_center([7.2, 1.0, 8.0], [-1.0, 1.0, -0.5], 2.5, 3.0),
        BoundedPlane.from_center([0.0, 9.2, 1.0], [0.3, -1.0, 1.0], 4.0, 2.0),
    ]
    return PlaneScene(tuple(walls + panels))


# -- calibration truth ---------------------------------------------------------------


def beam_elevations(num_beams: int = 16, low_deg: float = -15.0, high_deg: float = 15.0) -> FloatArray:
    return np.radians(np.linspace(low_deg, high_deg, num_beams))


@dataclass
class CalibrationTruth:
    imu: ImuIntrinsics
    lidar: LidarIntrinsics
    extrinsics: Extrinsics


def sample_random_calibration(seed: int, config: RunConfig | None = None) -> CalibrationTruth:
    """Draw intrinsics around nominal values; the first beam keeps zero angle and offset corrections."""

    config = config or RunConfig()
    sim = config.simulation
    rng = np.random.default_rng(seed)
    lidar_cfg = config.lidar
    elevations = beam_elevations(
        lidar_cfg.num_beams, lidar_cfg.elevation_min_deg, lidar_cfg.elevation_max_deg
    )
    beams = len(elevations)
    lidar = LidarIntrinsics.nominal(elevations)
    imu = ImuIntrinsics()
    if sim.randomize_intrinsics:
        ls = sim.lidar_sigma
        params = np.column_stack(
            [
                rng.normal(0.0, np.radians(ls.elevation_deg), beams),
                rng.normal(0.0, np.radians(ls.azimuth_deg), beams),
                rng.normal(0.0, ls.vertical_offset, beams),
                rng.normal(0.0, ls.horizontal_offset, beams),
                rng.normal(1.0, ls.range_scale, beams),
                rng.normal(0.0, ls.range_offset, beams),
            ]
        )
        params[0, :4] = 0.0
        lidar = LidarIntrinsics.from_matrix(elevations, params)
        isg = sim.imu_sigma
        imu = ImuIntrinsics(
            gyro_scale=rng.normal(1.0, isg.gyro_scale, 3),
            gyro_misalignment=rng.normal(0.0, np.radians(isg.gyro_misalignment_deg), 3),
            accel_scale=rng.normal(1.0, isg.accel_scale, 3),
            accel_misalignment=rng.normal(0.0, np.radians(isg.accel_misalignment_deg), 3),
            gyro_rotation=matrix_to_quat(euler_to_matrix(*np.radians(sim.gyro_rotation_deg))),
        )
    extrinsics = Extrinsics(
        rotation=matrix_to_quat(euler_to_matrix(*np.radians(sim.extrinsic_rotation_deg))),
        translation=np.asarray(sim.extrinsic_translation, dtype=float),
        time_offset=sim.time_offset,
    )
    return CalibrationTruth(imu, lidar, extrinsics)


# -- LiDAR model inversion -----------------------------------------------------------


def lidar_raw_from_point(
    point: ArrayLike, beam: LidarBeamIntrinsics, time: float = 0.0, beam_index: int = 0, tol: float = 1e-12
) -> RawLidarPoint:
    """Raw range/azimuth whose corrected beam model reproduces ``point``, by Gauss-Newton."""

    p = np.asarray(point, dtype=float)
    elevation = beam.elevation + beam.d_elevation
    ce, se = np.cos(elevation), np.sin(elevation)
    theta = float(np.arctan2(p[1], p[0]))
    rho = float(np.linalg.norm(p))
    for _ in range(50):
        ca, sa = np.cos(theta), np.sin(theta)
        model = np.array(
            [
                rho * ce * ca + beam.horizontal * sa,
                rho * ce * sa + beam.horizontal * ca,
                rho * se + beam.vertical,
            ]
        )
        jac = np.column_stack(
            [
                [ce * ca, ce * sa, se],
                [-rho * ce * sa + beam.horizontal * ca, rho * ce * ca - beam.horizontal * sa, 0.0],
            ]
        )
        step, *_ = np.linalg.lstsq(jac, p - model, rcond=None)
        rho += float(step[0])
        theta += float(step[1])
        if np.max(np.abs(step)) < tol:
            break
    raw_range = (rho - beam.range_offset) / beam.scale
    return RawLidarPoint(beam_index, time, raw_range, theta - beam.d_azimuth)


# -- measurement synthesis -----------------------------------------------------------


@dataclass
class GroundTruth:
    """Everything the simulator used to generate a dataset."""

    motion: Motion
    calibration: CalibrationTruth
    gyro_bias: FloatArray
    accel_bias: FloatArray
    gravity: FloatArray = field(default_factory=lambda: WORLD_GRAVITY.copy())
    mounting: str = "A"
    seed: int = 0

    @property
    def extrinsics(self) -> Extrinsics:
        return self.calibration.extrinsics

    def lidar_pose(self, t: ArrayLike) -> tuple[FloatArray, FloatArray]:
        """World-from-LiDAR rotation and translation at true (IMU clock) times."""

        kin = self.motion.kinematics(t)
        ext = self.extrinsics
        rotation = kin.rotation @ ext.rotation_matrix()
        translation = np.einsum("nab,b->na", kin.rotation, ext.translation) + kin.position
        return rotation, translation


@dataclass
class SimulatedDataset:
    imu: ImuStream
    scans: list[LidarScan]
    truth: GroundTruth


def generate_imu(
    motion: Motion,
    truth: GroundTruth,
    rate_hz: float,
    duration: float,
    gyro_density: float = 0.0,
    accel_density: float = 0.0,
    gyro_walk: float = 0.0,
    accel_walk: float = 0.0,
    rng: np.random.Generator | None = None,
) -> ImuStream:
    """``rate_hz * duration`` samples at ``t = k / rate_hz`` through the full intrinsic model."""

    rng = rng or np.random.default_rng(0)
    count = int(round(rate_hz * duration))
    times = np.arange(count) / rate_hz
    kin = motion.kinematics(times)
    intr = truth.calibration.imu
    dt = 1.0 / rate_hz
    gyro_bias = truth.gyro_bias + np.cumsum(rng.normal(0.0, gyro_walk * np.sqrt(dt), (count, 3)), axis=0)
    accel_bias = truth.accel_bias + np.cumsum(rng.normal(0.0, accel_walk * np.sqrt(dt), (count, 3)), axis=0)
    gyro_bias[0], accel_bias[0] = truth.gyro_bias, truth.accel_bias
    body_acc = kin.body_acceleration(truth.gravity)
    gyro = kin.omega @ intr.gyro_matrix().T + body_acc @ intr.g_sensitivity.T + gyro_bias
    accel = body_acc @ intr.accel_matrix().T + accel_bias
    root = np.sqrt(rate_hz)
    gyro += rng.normal(0.0, gyro_density * root, gyro.shape)
    accel += rng.normal(0.0, accel_density * root, accel.shape)
    return ImuStream(times, gyro, accel)


def generate_lidar_scan(
    truth: GroundTruth,
    scene: PlaneScene,
    start_time: float,
    period: float = 0.1,
    azimuth_step_deg: float = 0.2,
    distortion: bool = True,
    range_noise: float = 0.0,
    min_range: float = 0.0,
    rng: np.random.Generator | None = None,
) -> LidarScan:
    """One sweep starting at true time ``start_time``; stamps are on the LiDAR clock ``t - t_c``."""

    rng = rng or np.random.default_rng(0)
    intr = truth.calibration.lidar
    beams = intr.num_beams
    azimuth = np.radians(np.arange(0.0, 360.0, azimuth_step_deg))
    steps = len(azimuth)
    beam_idx = np.tile(np.arange(beams), steps)
    encoder = np.repeat(azimuth, beams)
    order = np.arange(steps * beams)
    times = start_time + period * order / (steps * beams) if distortion else np.full(len(order), start_time)

    elev = intr.elevation[beam_idx] + intr.d_elevation[beam_idx]
    theta = encoder + intr.d_azimuth[beam_idx]
    horiz = intr.horizontal[beam_idx]
    direction = np.column_stack([np.cos(elev) * np.cos(theta), np.cos(elev) * np.sin(theta), np.sin(elev)])
    origin = np.column_stack([horiz * np.sin(theta), horiz * np.cos(theta), intr.vertical[beam_idx]])

    rotation, translation = truth.lidar_pose(times)
    world_origin = np.einsum("nab,nb->na", rotation, origin) + translation
    world_dir = np.einsum("nab,nb->na", rotation, direction)
    dist, _ = scene.cast(world_origin, world_dir, min_range)
    hit = np.isfinite(dist)
    ranges = (dist[hit] - intr.range_offset[beam_idx[hit]]) / intr.scale[beam_idx[hit]]
    if range_noise > 0.0:
        ranges = ranges + rng.normal(0.0, range_noise, ranges.shape)
    offset = truth.extrinsics.time_offset
    return LidarScan(
        start_time=start_time - offset,
        times=times[hit] - offset,
        beams=beam_idx[hit],
        ranges=ranges,
        azimuths=encoder[hit],
    )


def build_motion(sim: SimulationConfig) -> AnalyticTrajectory:
    if sim.trajectory == "alternating":
        return alternating_trajectory(sim.duration, sim.segment_length, sim.blend_time, sim.mounting)
    return AnalyticTrajectory(sim.trajectory, sim.duration, mounting_case(sim.mounting))


def simulate_dataset(
    config: RunConfig, scene: PlaneScene | None = None, motion: Motion | None = None
) -> SimulatedDataset:
    """Generate IMU samples and LiDAR sweeps for ``config.simulation``; deterministic per seed."""

    sim = config.simulation
    scene = scene or default_room()
    motion = motion or build_motion(sim)
    calibration = sample_random_calibration(sim.seed, config)
    truth = GroundTruth(
        motion=motion,
        calibration=calibration,
        gyro_bias=np.asarray(sim.gyro_bias, dtype=float),
        accel_bias=np.asarray(sim.accel_bias, dtype=float),
        mounting=sim.mounting,
        seed=sim.seed,
    )
    seeds = np.random.SeedSequence(sim.seed).spawn(2)
    imu_rng = np.random.default_rng(seeds[0])
    imu_cfg = config.imu
    imu = generate_imu(
        motion,
        truth,
        imu_cfg.rate_hz,
        sim.duration,
        imu_cfg.gyro_noise_density if sim.imu_noise else 0.0,
        imu_cfg.accel_noise_density if sim.imu_noise else 0.0,
        imu_cfg.gyro_bias_walk if sim.imu_noise else 0.0,
        imu_cfg.accel_bias_walk if sim.imu_noise else 0.0,
        imu_rng,
    )
    num_scans = int(np.floor(sim.duration / sim.scan_period + 1e-9))
    scan_seeds = seeds[1].spawn(num_scans)
    scans = []
    for k in range(num_scans):
        start = k * sim.scan_period
        if start + sim.scan_period > motion.t_max + 1e-9:
            break
        scans.append(
            generate_lidar_scan(
                truth,
                scene,
                start,
                sim.scan_period,
                sim.azimuth_step_deg,
                sim.distortion,
                config.lidar.range_noise if sim.lidar_noise else 0.0,
                config.lidar.min_range,
                np.random.default_rng(scan_seeds[k]),
            )
        )
    logger.info(
        "simulated %d IMU samples and %d scans (%s, case %s)",
        len(imu),
        len(scans),
        sim.trajectory,
        sim.mounting,
    )
    return SimulatedDataset(imu, scans, truth)


def truth_nav_state(truth: GroundTruth) -> ImuNavState:
    return ImuNavState(truth.gravity.copy(), truth.gyro_bias.copy(), truth.accel_bias.copy())


def fit_truth_spline(motion: Motion, t_start: float, t_end: float, dt: float) -> TrajectorySpline:
    """Least-squares spline through densely sampled truth poses (world frame)."""

    spline = TrajectorySpline.covering(t_start, t_end, dt)
    samples = np.linspace(spline.t_min, spline.t_max, max(20 * spline.num_knots, 200))
    kin = motion.kinematics(samples)
    design = spline.position_design(samples).toarray()
    positions, *_ = np.linalg.lstsq(design, kin.position, rcond=None)
    knot_times = spline.t0 + (np.arange(spline.num_knots) - 1) * spline.dt
    knot_times = np.clip(knot_times, motion.t_min, motion.t_max)
    quats = np.array([matrix_to_quat(r) for r in motion.kinematics(knot_times).rotation])
    return TrajectorySpline(spline.t0, spline.dt, positions, quats)
