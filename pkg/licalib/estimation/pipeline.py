"""Outer refinement loop and multi-segment orchestration.

Each outer iteration rebuilds the surfel map from the current state, fixes the
point-to-plane associations, and runs a few Levenberg-Marquardt steps on the
joint IMU + LiDAR cost. Intrinsics are unlocked after
``solver.intrinsic_start_iteration`` outer iterations and the map switches to
intrinsic-corrected points after ``solver.raw_correction_iteration``.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path

import numpy as np

from licalib.config import RunConfig
from licalib.dataset import Dataset, scans_in_window, subsample_scan
from licalib.errors import CalibrationError, ConvergenceError, InsufficientDataError, PipelineError
from licalib.estimation.residuals import (
    AssociatedPoints,
    ImuSigmas,
    LidarNoise,
    ResidualBlock,
    block_cost,
    imu_blocks,
    lidar_block,
)
from licalib.estimation.segments import (
    SegmentInfo,
    SegmentSelection,
    extrinsic_information,
    segment_information,
    select_segments,
    split_segments,
)
from licalib.estimation.solver import (
    NormalSystem,
    StepInfo,
    assemble_normal_system,
    damped_full_step,
    levenberg_marquardt,
    observability_aware_step,
)
from licalib.estimation.state import ActiveBlocks, CalibState, SegmentState, StateLayout, apply_update
from licalib.geometry import FloatArray, RigidTransform, matrix_to_euler, quat_to_matrix
from licalib.initializer import damping_options, initialize_state
from licalib.metrics import mean_map_entropy
from licalib.schemas import IterationRecord, StageTiming
from licalib.sensors import (
    IMU_INTRINSIC_NAMES,
    ImuStream,
    LidarIntrinsics,
    LidarScan,
    lidar_map_projection,
    project_raw,
)
from licalib.surfel_map import PosedScan, SurfelMap, associate, build_map, dump_surfels_csv, extract_surfels

logger = logging.getLogger(__name__)

ReferencePoses = Callable[[Sequence[float]], list[RigidTransform]]


@dataclass
class SegmentData:
    """Measurements of one time window; ``scans`` feed odometry, ``sampled`` feed the refinement."""

    index: int
    t_start: float
    t_end: float
    imu: ImuStream
    scans: list[LidarScan]
    sampled: list[LidarScan]

    @property
    def anchor_time(self) -> float:
        return self.scans[0].start_time


class StageTimer:
    """Wall-clock seconds accumulated per named stage."""

    def __init__(self) -> None:
        self.seconds: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - start

    def records(self) -> list[StageTiming]:
        return [StageTiming(stage=name, seconds=round(value, 4)) for name, value in self.seconds.items()]


def prepare_segment(
    dataset: Dataset, index: int, window: tuple[float, float], config: RunConfig
) -> SegmentData:
    """Select IMU samples and scans of ``window``; scans keep a ``time_offset_bound`` margin."""

    t_start, t_end = window
    margin = config.solver.time_offset_bound
    imu = dataset.imu.select((dataset.imu.times >= t_start) & (dataset.imu.times <= t_end))
    scans = scans_in_window(dataset.scans, t_start + margin, t_end - margin)
    if len(imu) < 2 or len(scans) < 3:
        raise InsufficientDataError(
            f"segment {index} [{t_start:.2f}, {t_end:.2f}] has {len(imu)} IMU samples and {len(scans)} scans"
        )
    sampled = [subsample_scan(scan, config.lidar.point_stride) for scan in scans]
    return SegmentData(index, t_start, t_end, imu, scans, sampled)


# -- association ---------------------------------------------------------------------


@dataclass
class SegmentAssociation:
    points: AssociatedPoints
    surfels: SurfelMap
    map_points: FloatArray


def _scan_lidar_points(scan: LidarScan, intrinsics: LidarIntrinsics, min_range: float):
    if scan.is_raw:
        keep = np.flatnonzero(scan.ranges > min_range)
        sub = scan.subset(keep)
        return sub, project_raw(sub.beams, sub.ranges, sub.azimuths, intrinsics)
    keep = np.flatnonzero(np.linalg.norm(scan.points, axis=1) > min_range)
    sub = scan.subset(keep)
    return sub, sub.points


def associate_segment(
    state: CalibState,
    segment: int,
    data: SegmentData,
    map_intrinsics: LidarIntrinsics,
    config: RunConfig,
) -> SegmentAssociation:
    """Build the segment map with ``map_intrinsics`` and pair every point with a surfel."""

    seg = state.segments[segment]
    ext = state.extrinsics_for(segment)
    posed, kept = [], []
    for k, scan in enumerate(data.sampled):
        sub, lidar_points = _scan_lidar_points(scan, map_intrinsics, config.lidar.min_range)
        if len(sub) == 0:
            continue
        proj = lidar_map_projection(seg.trajectory, ext, lidar_points, sub.times, data.anchor_time)
        translation = proj.map_points - np.einsum("nab,nb->na", proj.map_from_lidar, lidar_points)
        posed.append(PosedScan(lidar_points, proj.map_from_lidar, translation, sub.times, sub.beams, k))
        kept.append(sub)
    cloud = build_map(posed)
    surfel_cfg = config.surfel
    surfels = extract_surfels(
        cloud.points, surfel_cfg.cell_size, surfel_cfg.plane_likeness_threshold, surfel_cfg.min_points
    )
    pairs = associate(cloud.points, surfels, surfel_cfg.association_gate)
    rows = pairs.point_index
    if kept and kept[0].is_raw:
        beams = np.concatenate([sub.beams for sub in kept])[rows]
        ranges = np.concatenate([sub.ranges for sub in kept])[rows]
        azimuths = np.concatenate([sub.azimuths for sub in kept])[rows]
        points = None
    else:
        beams = ranges = azimuths = None
        points = np.concatenate([sub.points for sub in kept])[rows] if kept else np.zeros((0, 3))
    associated = AssociatedPoints(
        times=cloud.times[rows],
        normals=surfels.normals[pairs.plane_index] if len(pairs) else np.zeros((0, 3)),
        offsets=surfels.offsets[pairs.plane_index] if len(pairs) else np.zeros(0),
        plane_ids=pairs.plane_index,
        beams=beams,
        ranges=ranges,
        azimuths=azimuths,
        points=points,
    )
    logger.debug(
        "segment %d: %d map points, %d surfels, %d associations",
        segment,
        len(cloud),
        len(surfels),
        len(pairs),
    )
    return SegmentAssociation(associated, surfels, cloud.points)


# -- problem -------------------------------------------------------------------------


@dataclass
class CalibProblem:
    """Joint IMU + point-to-plane least-squares problem over fixed associations."""

    segments: list[SegmentData]
    points: list[AssociatedPoints]
    layout: StateLayout
    sigmas: ImuSigmas
    noise: LidarNoise
    huber_delta: float
    time_offset_bound: float

    def blocks(self, state: CalibState, with_jacobians: bool = True) -> list[ResidualBlock]:
        layout = self.layout if with_jacobians else None
        blocks: list[ResidualBlock] = []
        for s, data in enumerate(self.segments):
            imu, _ = imu_blocks(state, data.imu, self.sigmas, layout, s)
            blocks.extend(imu)
            blocks.append(lidar_block(state, self.points[s], data.anchor_time, self.noise, layout, s))
        return blocks

    def linearize(self, state: CalibState) -> NormalSystem:
        return assemble_normal_system(self.blocks(state), self.layout.size, self.huber_delta)

    def cost(self, state: CalibState) -> float:
        return sum(block_cost(block, self.huber_delta) for block in self.blocks(state, with_jacobians=False))

    def retract(self, state: CalibState, step: FloatArray) -> CalibState:
        return apply_update(state, self.layout, step, self.time_offset_bound)


def parameter_trace(state: CalibState) -> dict[str, float]:
    """Flat snapshot of the calibration parameters for convergence plots."""

    trace: dict[str, float] = {}
    euler = np.degrees(matrix_to_euler(quat_to_matrix(state.extrinsic_rotation)))
    for axis, value in zip("xyz", euler, strict=True):
        trace[f"ext_rot_{axis}_deg"] = float(value)
    for axis, value in zip("xyz", state.extrinsic_translation, strict=True):
        trace[f"ext_trans_{axis}"] = float(value)
    for s, segment in enumerate(state.segments):
        trace[f"time_offset_{s}"] = segment.time_offset
    imu = state.imu
    values = np.concatenate(
        [
            imu.gyro_scale,
            imu.gyro_misalignment,
            imu.accel_scale,
            imu.accel_misalignment,
            np.degrees(matrix_to_euler(quat_to_matrix(imu.gyro_rotation))),
        ]
    )
    for name, value in zip(IMU_INTRINSIC_NAMES, values, strict=True):
        trace[name] = float(value)
    return trace


# -- outer loop ----------------------------------------------------------------------


@dataclass
class OptimizeResult:
    state: CalibState
    records: list[IterationRecord] = field(default_factory=list)
    converged: bool = False
    stopped_early: bool = False
    diagnostic: str | None = None
    system: NormalSystem | None = None
    layout: StateLayout | None = None
    step_info: StepInfo | None = None
    warnings: list[str] = field(default_factory=list)


def _mme(points: FloatArray, config: RunConfig) -> tuple[float | None, int]:
    if len(points) == 0:
        return None, 0
    metrics = config.metrics
    try:
        entropy = mean_map_entropy(
            points, metrics.mme_radius, metrics.mme_min_neighbors, metrics.mme_max_points
        )
    except InsufficientDataError as exc:
        logger.warning("map entropy unavailable: %s", exc)
        return None, len(points)
    return entropy.value, entropy.skipped


def optimize(
    state: CalibState,
    segments: Sequence[SegmentData],
    config: RunConfig,
    iterations: int | None = None,
    calibrate_intrinsics: bool | None = None,
    timer: StageTimer | None = None,
    output_dir: Path | None = None,
) -> OptimizeResult:
    """Run the scheduled outer loop; on a damping blow-up the best state so far is returned."""

    solver = config.solver
    total = iterations or solver.max_iterations
    intrinsics = solver.calibrate_intrinsics if calibrate_intrinsics is None else calibrate_intrinsics
    timer = timer or StageTimer()
    nominal = LidarIntrinsics.nominal(state.lidar.elevation)
    sigmas = ImuSigmas.from_densities(
        config.imu.gyro_noise_density, config.imu.accel_noise_density, config.imu.rate_hz
    )
    noise = LidarNoise(config.lidar.range_noise, config.lidar.incidence_floor)
    options = damping_options(config)
    raw = all(data.sampled[0].is_raw for data in segments)
    result = OptimizeResult(state)

    for iteration in range(1, total + 1):
        unlock = intrinsics and iteration > solver.intrinsic_start_iteration
        corrected = intrinsics and iteration > solver.raw_correction_iteration
        active = replace(ActiveBlocks().with_intrinsics(unlock), lidar_intrinsics=unlock and raw)
        layout = StateLayout.build(state, active)
        map_intrinsics = state.lidar if corrected else nominal

        with timer.stage("association"):
            associations = [
                associate_segment(state, s, data, map_intrinsics, config) for s, data in enumerate(segments)
            ]
        num_associations = sum(len(item.points) for item in associations)
        if num_associations == 0:
            raise PipelineError("association", f"no point matched a surfel in iteration {iteration}")
        mme, mme_skipped = _mme(np.vstack([item.map_points for item in associations]), config)
        if config.surfel.dump_csv and output_dir is not None:
            for s, item in enumerate(associations):
                dump_surfels_csv(item.surfels, output_dir / "surfels" / f"iter{iteration:02d}_seg{s}.csv")

        problem = CalibProblem(
            list(segments),
            [item.points for item in associations],
            layout,
            sigmas,
            noise,
            config.lidar.huber_delta,
            solver.time_offset_bound,
        )
        step_solver = damped_full_step
        if solver.use_tsvd:
            step_solver = partial(
                _protected_step,
                protected=layout.extrinsic_columns,
                relative=solver.tsvd_relative_threshold,
                absolute=solver.tsvd_absolute_threshold,
            )
        with timer.stage("optimization"):
            try:
                lm = levenberg_marquardt(problem, state, solver.inner_iterations, options, step_solver)
            except ConvergenceError as exc:
                logger.warning("iteration %d stopped: %s", iteration, exc)
                result.stopped_early = True
                result.diagnostic = f"iteration {iteration}: {exc}"
                break
        state = lm.state
        info = lm.step_info
        if info is not None:
            singular_values, retained, dropped = info.singular_values, info.rank, info.dropped
            if info.all_dropped:
                result.warnings.append(f"iteration {iteration}: every extrinsic direction was truncated")
        else:
            singular_values, _, _ = extrinsic_information(lm.system, layout)
            retained, dropped = int(np.count_nonzero(singular_values > 0.0)), np.zeros((0, 6))
        record = IterationRecord(
            iteration=iteration,
            cost=lm.cost,
            cost_by_kind=lm.system.cost_by_kind if lm.system is not None else {},
            num_associations=num_associations,
            num_surfels=sum(len(item.surfels) for item in associations),
            mme=mme,
            mme_skipped=mme_skipped,
            active_blocks=active.names(),
            raw_correction=corrected,
            singular_values=[float(v) for v in singular_values],
            retained_rank=retained,
            dropped_directions=[[float(v) for v in row] for row in dropped],
            accepted_steps=lm.accepted,
            damping=lm.damping,
            parameters=parameter_trace(state),
        )
        result.records.append(record)
        result.state, result.system, result.layout, result.step_info = state, lm.system, layout, info
        logger.info(
            "iteration %d/%d cost=%.6g associations=%d mme=%s rank=%d",
            iteration,
            total,
            lm.cost,
            num_associations,
            "n/a" if mme is None else f"{mme:.4f}",
            retained,
        )
    result.state = state
    result.converged = not result.stopped_early
    return result


def _protected_step(
    system: NormalSystem, damping: float, protected: np.ndarray, relative: float, absolute: float | None
) -> tuple[FloatArray, StepInfo]:
    return observability_aware_step(system, protected, damping, relative, absolute)


# -- calibration entry points --------------------------------------------------------


@dataclass
class CalibrationRun:
    state: CalibState
    optimization: OptimizeResult
    segments: list[SegmentData]
    timings: list[StageTiming]
    warnings: list[str] = field(default_factory=list)


def _initialize(
    data: SegmentData, config: RunConfig, reference: ReferencePoses | None, timer: StageTimer
) -> tuple[CalibState, list[str]]:
    nominal = _nominal_intrinsics(config)
    poses = reference([scan.start_time for scan in data.scans]) if reference is not None else None
    with timer.stage("initialization"):
        try:
            init = initialize_state(data.imu, data.scans, config, nominal, data.t_start, data.t_end, poses)
        except CalibrationError as exc:
            raise PipelineError("initialization", str(exc)) from exc
    return init.state, init.warnings


def _nominal_intrinsics(config: RunConfig) -> LidarIntrinsics:
    lidar = config.lidar
    elevations = np.radians(np.linspace(lidar.elevation_min_deg, lidar.elevation_max_deg, lidar.num_beams))
    return LidarIntrinsics.nominal(elevations)


def calibrate_dataset(
    dataset: Dataset,
    config: RunConfig,
    window: tuple[float, float] | None = None,
    reference: ReferencePoses | None = None,
    output_dir: Path | None = None,
) -> CalibrationRun:
    """Initialize and refine over one window (the whole IMU span by default)."""

    timer = StageTimer()
    window = window or dataset.time_span
    data = prepare_segment(dataset, 0, window, config)
    state, warnings = _initialize(data, config, reference, timer)
    optimization = optimize(state, [data], config, timer=timer, output_dir=output_dir)
    return CalibrationRun(
        optimization.state, optimization, [data], timer.records(), warnings + optimization.warnings
    )


@dataclass
class SegmentAnalysis:
    selection: SegmentSelection
    segments: list[SegmentData]
    states: dict[int, CalibState]
    timings: list[StageTiming]
    warnings: list[str] = field(default_factory=list)


def analyze_segments(
    dataset: Dataset, config: RunConfig, reference: ReferencePoses | None = None
) -> SegmentAnalysis:
    """Split the sequence, run a short calibration per window and rank windows by extrinsic information."""

    timer = StageTimer()
    seg_cfg = config.segments
    t_start, t_end = dataset.time_span
    infos: list[SegmentInfo] = []
    segments: list[SegmentData] = []
    states: dict[int, CalibState] = {}
    warnings: list[str] = []
    for index, window in enumerate(split_segments(t_start, t_end, seg_cfg.length)):
        try:
            data = prepare_segment(dataset, index, window, config)
            state, init_warnings = _initialize(data, config, reference, timer)
            short = optimize(
                state, [data], config, seg_cfg.calibration_iterations, calibrate_intrinsics=False, timer=timer
            )
        except (PipelineError, InsufficientDataError) as exc:
            logger.warning("segment %d skipped: %s", index, exc)
            warnings.append(f"segment {index} skipped: {exc}")
            continue
        warnings.extend(init_warnings + short.warnings)
        with timer.stage("information"):
            layout = StateLayout.build(short.state, ActiveBlocks())
            association = associate_segment(short.state, 0, data, short.state.lidar, config)
            problem = CalibProblem(
                [data],
                [association.points],
                layout,
                ImuSigmas.from_densities(
                    config.imu.gyro_noise_density, config.imu.accel_noise_density, config.imu.rate_hz
                ),
                LidarNoise(config.lidar.range_noise, config.lidar.incidence_floor),
                config.lidar.huber_delta,
                config.solver.time_offset_bound,
            )
            info = segment_information(
                problem.blocks(short.state), layout, index, window, config.lidar.huber_delta, seg_cfg.mode
            )
        infos.append(info)
        segments.append(data)
        states[index] = short.state
    if not infos:
        raise PipelineError("segment analysis", "no segment could be analyzed")
    selection = select_segments(infos, seg_cfg.sigma_threshold, seg_cfg.max_segments)
    if selection.empty:
        warnings.append(f"no segment exceeds the information threshold {seg_cfg.sigma_threshold}")
    return SegmentAnalysis(selection, segments, states, timer.records(), warnings)


def joint_state(states: Sequence[CalibState]) -> CalibState:
    """Stack per-window trajectories; spatial extrinsics and intrinsics come from the first state."""

    if not states:
        raise InsufficientDataError("joint calibration needs at least one segment")
    first = states[0]
    segments = [SegmentState(s.trajectory.copy(), s.nav.copy(), s.segments[0].time_offset) for s in states]
    return CalibState(
        segments,
        first.imu.copy(),
        first.lidar.copy(),
        first.extrinsic_rotation.copy(),
        first.extrinsic_translation.copy(),
    )


def calibrate_selected(
    analysis: SegmentAnalysis, config: RunConfig, output_dir: Path | None = None
) -> CalibrationRun:
    """Jointly refine the selected windows with shared extrinsics and intrinsics."""

    chosen = analysis.selection.selected
    if not chosen:
        raise PipelineError("joint calibration", "no informative segment was selected")
    by_index = {data.index: data for data in analysis.segments}
    data = [by_index[index] for index in chosen]
    state = joint_state([analysis.states[index] for index in chosen])
    timer = StageTimer()
    optimization = optimize(state, data, config, timer=timer, output_dir=output_dir)
    warnings = list(optimization.warnings)
    return CalibrationRun(optimization.state, optimization, data, timer.records(), warnings)
