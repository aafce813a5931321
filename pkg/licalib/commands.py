"""Command implementations behind the ``scripts/`` entrypoints.

Every command takes a resolved `RunConfig`, writes its artifacts plus a config
snapshot into an output directory and returns the pydantic document it wrote.
"""

from __future__ import annotations

import csv
import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
from jinja2 import Environment, FileSystemLoader

from licalib.config import SNAPSHOT_NAME, RunConfig, load_config
from licalib.dataset import (
    GROUND_TRUTH_FILE,
    Dataset,
    ground_truth_from_record,
    imu_from_record,
    imu_record,
    lidar_from_records,
    lidar_records,
    read_dataset,
    read_ground_truth,
    write_simulated_dataset,
)
from licalib.errors import CalibrationError, ConfigError, DatasetError, PipelineError
from licalib.estimation.pipeline import (
    CalibrationRun,
    ReferencePoses,
    analyze_segments,
    calibrate_dataset,
    calibrate_selected,
)
from licalib.estimation.segments import SegmentInfo
from licalib.estimation.solver import covariance_diagonal
from licalib.geometry import RigidTransform, matrix_to_euler, quat_to_matrix
from licalib.metrics import IntrinsicLimits, acceptance_verdict, calibration_report, non_increasing
from licalib.schemas import (
    CalibrationReport,
    CalibrationResult,
    ExtrinsicEstimate,
    GroundTruthRecord,
    IterationRecord,
    NavEstimate,
    SegmentRanking,
    SegmentRecord,
)
from licalib.sensors import Extrinsics, LidarScan, project_raw
from licalib.simulator import SimulatedDataset, simulate_dataset

logger = logging.getLogger(__name__)

UTC = timezone.utc

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PIPELINE = 3
EXIT_CHECK = 4

RESULT_FILE = "calibration.json"
SEGMENTS_FILE = "segments.json"
SUMMARY_FILE = "summary.md"
ITERATIONS_FILE = "iterations.csv"
SPECTRUM_FILE = "spectrum.csv"
DROPPED_FILE = "dropped_directions.csv"
MME_FILE = "mme.csv"

TEMPLATE_DIR = Path(__file__).resolve().parent / "templates"
REPORT_TEMPLATE_ENV = Environment(
    loader=FileSystemLoader(str(TEMPLATE_DIR)),
    autoescape=False,
    trim_blocks=True,
    lstrip_blocks=True,
)
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str = "INFO") -> None:
    """Configure root logging once for a script run."""

    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, datefmt="%H:%M:%S")


def exit_code_for(exc: CalibrationError) -> int:
    """Map a failure to the documented process exit code."""

    if isinstance(exc, ConfigError | DatasetError):
        return EXIT_CONFIG
    return EXIT_PIPELINE


def _now() -> str:
    return datetime.now(UTC).isoformat(timespec="seconds")


def _write_json(payload: dict[str, Any], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False), encoding="utf-8")
    return path


# -- simulate ------------------------------------------------------------------------


def _as_xyz(scan: LidarScan, dataset: SimulatedDataset) -> LidarScan:
    points = project_raw(scan.beams, scan.ranges, scan.azimuths, dataset.truth.calibration.lidar)
    return LidarScan(scan.start_time, scan.times, points=points)


def cmd_simulate(config: RunConfig, output_dir: Path | None = None) -> Path:
    """Simulate a dataset with ground-truth sidecar and config snapshot."""

    directory = Path(output_dir or config.dataset.root)
    dataset = simulate_dataset(config)
    if config.dataset.lidar_format == "xyz":
        scans = [_as_xyz(scan, dataset) for scan in dataset.scans]
        dataset = SimulatedDataset(dataset.imu, scans, dataset.truth)
    try:
        write_simulated_dataset(dataset, config, directory)
        config.write_snapshot(directory)
    except OSError as exc:
        raise DatasetError(f"{directory.as_posix()}: cannot write dataset ({exc})") from exc
    return directory


# -- calibrate -----------------------------------------------------------------------


def _load_dataset(config: RunConfig, dataset_dir: Path | None) -> Dataset:
    root = Path(dataset_dir or config.dataset.root)
    fmt = None if config.dataset.lidar_format == "auto" else config.dataset.lidar_format
    return read_dataset(root, fmt, config.imu.sample_stride)


def _sidecar(dataset_root: Path) -> GroundTruthRecord | None:
    path = dataset_root / GROUND_TRUTH_FILE
    if not path.exists():
        return None
    return read_ground_truth(path)


def reference_poses(record: GroundTruthRecord) -> ReferencePoses:
    """World-from-LiDAR poses at LiDAR scan stamps, taken from the simulated motion."""

    truth = ground_truth_from_record(record)

    def poses(starts: Sequence[float]) -> list[RigidTransform]:
        rotations, translations = truth.lidar_pose(np.asarray(starts, dtype=float) + record.time_offset)
        return [RigidTransform(rot, trans) for rot, trans in zip(rotations, translations, strict=True)]

    return poses


def _reference_for(config: RunConfig, record: GroundTruthRecord | None, root: Path) -> ReferencePoses | None:
    if config.odometry.mode != "ground-truth-perturbed":
        return None
    if record is None:
        path = (root / GROUND_TRUTH_FILE).as_posix()
        raise DatasetError(f"{path}: ground-truth odometry needs the sidecar")
    return reference_poses(record)


def _unobservable_axes(record: GroundTruthRecord) -> list[int]:
    if record.trajectory != "figure8":
        return []
    direction = np.asarray(record.unobservable_direction[3:])
    return [axis for axis in range(3) if abs(direction[axis]) > 0.1]


def evaluate_result(
    result: CalibrationResult, record: GroundTruthRecord, config: RunConfig
) -> CalibrationReport:
    """Compare a stored result against a simulator sidecar, including the acceptance verdict."""

    ext = result.extrinsics
    offset = ext.time_offsets[0] if ext.time_offsets else 0.0
    estimate = Extrinsics(ext.rotation_xyzw, ext.translation, offset)
    truth = Extrinsics(record.extrinsic_rotation_xyzw, record.extrinsic_translation, record.time_offset)
    lidar = lidar_from_records(result.lidar) if result.lidar else None
    report = calibration_report(
        estimate,
        truth,
        imu_from_record(result.imu),
        imu_from_record(record.imu),
        lidar,
        lidar_from_records(record.lidar) if lidar is not None else None,
        time_offsets=ext.time_offsets,
    )
    metrics = config.metrics
    limits = None
    if config.solver.calibrate_intrinsics:
        limits = IntrinsicLimits(
            imu_scale=metrics.max_imu_scale_error,
            imu_misalignment=metrics.max_imu_misalignment_error,
            gyro_rotation_deg=metrics.max_gyro_rotation_error_deg,
            lidar_angle_deg=metrics.max_lidar_angle_error_deg,
            lidar_offset_mm=metrics.max_lidar_offset_error_mm,
            lidar_scale_percent=metrics.max_lidar_scale_error_percent,
        )
    report.verdict = acceptance_verdict(
        report,
        metrics.max_translation_error_cm,
        metrics.max_rotation_error_deg,
        metrics.max_time_offset_error_ms,
        skip_axes=_unobservable_axes(record),
        intrinsic_limits=limits,
    )
    return report


def build_result(run: CalibrationRun, dataset: Dataset, config: RunConfig) -> CalibrationResult:
    """Serialize the final state with marginal standard deviations on retained directions."""

    state = run.state
    opt = run.optimization
    rot_std: list[float] = []
    trans_std: list[float] = []
    offset_std: list[float] = []
    if opt.system is not None and opt.layout is not None:
        variance = covariance_diagonal(opt.system, config.solver.tsvd_relative_threshold)
        std = np.sqrt(np.clip(variance, 0.0, None))
        layout = opt.layout
        if np.all(layout.extrinsic_rotation >= 0):
            rot_std = np.degrees(std[layout.extrinsic_rotation]).tolist()
        if np.all(layout.extrinsic_translation >= 0):
            trans_std = std[layout.extrinsic_translation].tolist()
        offset_std = [float(std[seg.time_offset]) for seg in layout.segments if seg.time_offset >= 0]
    extrinsics = ExtrinsicEstimate(
        rotation_xyzw=state.extrinsic_rotation.tolist(),
        rotation_euler_deg=np.degrees(matrix_to_euler(quat_to_matrix(state.extrinsic_rotation))).tolist(),
        translation=state.extrinsic_translation.tolist(),
        time_offsets=[segment.time_offset for segment in state.segments],
        rotation_std_deg=rot_std,
        translation_std=trans_std,
        time_offset_std=offset_std,
    )
    navigation = [
        NavEstimate(
            segment=s,
            t_start=data.t_start,
            t_end=data.t_end,
            gravity=segment.nav.gravity.tolist(),
            gyro_bias=segment.nav.gyro_bias.tolist(),
            accel_bias=segment.nav.accel_bias.tolist(),
        )
        for s, (segment, data) in enumerate(zip(state.segments, run.segments, strict=True))
    ]
    return CalibrationResult(
        generated_at=_now(),
        dataset=dataset.root.as_posix(),
        converged=opt.converged,
        stopped_early=opt.stopped_early,
        diagnostic=opt.diagnostic,
        extrinsics=extrinsics,
        imu=imu_record(state.imu),
        lidar=lidar_records(state.lidar) if dataset.lidar_format == "raw" else [],
        navigation=navigation,
        iterations=opt.records,
        timings=run.timings,
        warnings=run.warnings,
    )


def _write_rows(path: Path, header: list[str], rows: list[list[Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_plot_tables(records: Sequence[IterationRecord], directory: Path) -> list[Path]:
    """Emit plot-ready CSVs: convergence traces, extrinsic spectrum, dropped directions and MME."""

    names = list(records[0].parameters) if records else []
    header = [
        "iteration",
        "cost",
        "num_associations",
        "num_surfels",
        "mme",
        "retained_rank",
        "accepted_steps",
        "damping",
        "raw_correction",
        *names,
    ]
    rows = [
        [
            rec.iteration,
            rec.cost,
            rec.num_associations,
            rec.num_surfels,
            "" if rec.mme is None else rec.mme,
            rec.retained_rank,
            rec.accepted_steps,
            rec.damping,
            int(rec.raw_correction),
            *(rec.parameters.get(name, "") for name in names),
        ]
        for rec in records
    ]
    spectrum = [
        [rec.iteration, k, value, int(k < rec.retained_rank)]
        for rec in records
        for k, value in enumerate(rec.singular_values)
    ]
    dropped = [[rec.iteration, *direction] for rec in records for direction in rec.dropped_directions]
    mme = [[rec.iteration, rec.mme] for rec in records if rec.mme is not None]
    return [
        _write_rows(directory / ITERATIONS_FILE, header, rows),
        _write_rows(
            directory / SPECTRUM_FILE, ["iteration", "index", "singular_value", "retained"], spectrum
        ),
        _write_rows(
            directory / DROPPED_FILE,
            ["iteration", "rot_x", "rot_y", "rot_z", "trans_x", "trans_y", "trans_z"],
            dropped,
        ),
        _write_rows(directory / MME_FILE, ["iteration", "mme"], mme),
    ]


def _write_run(result: CalibrationResult, config: RunConfig, directory: Path) -> Path:
    path = _write_json(result.model_dump(mode="json"), directory / RESULT_FILE)
    write_plot_tables(result.iterations, directory)
    config.write_snapshot(directory)
    return path


def cmd_calibrate(
    config: RunConfig, dataset_dir: Path | None = None, output_dir: Path | None = None
) -> CalibrationResult:
    """Initialize, refine and write the calibration result for one dataset."""

    dataset = _load_dataset(config, dataset_dir)
    record = _sidecar(dataset.root)
    directory = Path(output_dir or config.dataset.output_dir)
    reference = _reference_for(config, record, dataset.root)
    run = calibrate_dataset(dataset, config, reference=reference, output_dir=directory)
    result = build_result(run, dataset, config)
    if record is not None:
        result.evaluation = evaluate_result(result, record, config)
    path = _write_run(result, config, directory)
    logger.info("calibration written: %s", path.as_posix())
    return result


# -- segment selection ---------------------------------------------------------------


def _segment_record(info: SegmentInfo) -> SegmentRecord:
    return SegmentRecord(
        index=info.index,
        t_start=info.t_start,
        t_end=info.t_end,
        min_singular_value=info.min_singular_value,
        singular_values=info.singular_values.tolist(),
        direction=info.direction.tolist(),
        informative=info.informative,
        prior_added=info.prior_added,
        mode=info.mode,
    )


def cmd_select_segments(
    config: RunConfig, dataset_dir: Path | None = None, output_dir: Path | None = None
) -> SegmentRanking:
    """Rank fixed-length windows by extrinsic information; optionally calibrate the best jointly."""

    dataset = _load_dataset(config, dataset_dir)
    record = _sidecar(dataset.root)
    directory = Path(output_dir or config.dataset.output_dir)
    analysis = analyze_segments(dataset, config, _reference_for(config, record, dataset.root))
    selection = analysis.selection
    ranking = SegmentRanking(
        generated_at=_now(),
        dataset=dataset.root.as_posix(),
        threshold=selection.threshold,
        max_segments=selection.max_segments,
        selected=selection.selected,
        segments=[_segment_record(info) for info in selection.infos],
    )
    if config.segments.joint_calibration:
        if selection.empty:
            raise PipelineError("joint calibration", "no informative segment was selected")
        run = calibrate_selected(analysis, config, directory)
        run.timings = analysis.timings + run.timings
        run.warnings = analysis.warnings + run.warnings
        result = build_result(run, dataset, config)
        if record is not None:
            result.evaluation = evaluate_result(result, record, config)
        _write_run(result, config, directory)
        ranking.joint_calibration = result
    path = _write_json(ranking.model_dump(mode="json"), directory / SEGMENTS_FILE)
    config.write_snapshot(directory)
    logger.info("segment ranking written: %s (selected %s)", path.as_posix(), selection.selected)
    return ranking


# -- report --------------------------------------------------------------------------


@dataclass
class ReportOutcome:
    summary_path: Path
    markdown: str
    evaluation: CalibrationReport | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        verdict = self.evaluation.verdict if self.evaluation is not None else None
        return verdict is None or verdict.passed


def load_result(run_dir: Path) -> CalibrationResult:
    path = run_dir / RESULT_FILE
    if not path.exists():
        raise DatasetError(f"{path.as_posix()}: file not found")
    try:
        return CalibrationResult.model_validate_json(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise DatasetError(f"{path.as_posix()}: invalid calibration result") from exc


def _run_config(run_dir: Path) -> RunConfig:
    snapshot = run_dir / SNAPSHOT_NAME
    if snapshot.exists():
        return load_config(snapshot, environ={})
    logger.warning("%s missing; using default thresholds", snapshot.as_posix())
    return RunConfig()


def _parameter_rows(result: CalibrationResult, record: GroundTruthRecord | None) -> list[dict[str, Any]]:
    ext = result.extrinsics
    truth_euler = truth_trans = None
    if record is not None:
        truth_euler = np.degrees(matrix_to_euler(quat_to_matrix(record.extrinsic_rotation_xyzw))).tolist()
        truth_trans = record.extrinsic_translation
    rows = []
    for axis, name in enumerate("xyz"):
        rows.append(
            {
                "name": f"rotation {name} [deg]",
                "estimate": ext.rotation_euler_deg[axis],
                "std": ext.rotation_std_deg[axis] if ext.rotation_std_deg else None,
                "truth": truth_euler[axis] if truth_euler else None,
            }
        )
    for axis, name in enumerate("xyz"):
        rows.append(
            {
                "name": f"translation {name} [m]",
                "estimate": ext.translation[axis],
                "std": ext.translation_std[axis] if ext.translation_std else None,
                "truth": truth_trans[axis] if truth_trans else None,
            }
        )
    for s, offset in enumerate(ext.time_offsets):
        rows.append(
            {
                "name": f"time offset {s} [ms]",
                "estimate": offset * 1000.0,
                "std": ext.time_offset_std[s] * 1000.0 if s < len(ext.time_offset_std) else None,
                "truth": record.time_offset * 1000.0 if record is not None else None,
            }
        )
    return rows


def render_summary(
    result: CalibrationResult,
    evaluation: CalibrationReport | None,
    record: GroundTruthRecord | None,
    warnings: Sequence[str] = (),
) -> str:
    template = REPORT_TEMPLATE_ENV.get_template("summary.md.j2")
    mme = [rec.mme for rec in result.iterations]
    return template.render(
        result=result,
        rows=_parameter_rows(result, record),
        evaluation=evaluation,
        has_truth=record is not None,
        mme_non_increasing=non_increasing(mme) if any(v is not None for v in mme) else None,
        timings=result.timings,
        warnings=[*result.warnings, *warnings],
    )


def cmd_report(
    run_dir: Path, dataset_dir: Path | None = None, output_file: Path | None = None
) -> ReportOutcome:
    """Render the markdown summary of a calibration run and refresh its plot tables."""

    result = load_result(run_dir)
    config = _run_config(run_dir)
    root = Path(dataset_dir or result.dataset)
    warnings: list[str] = []
    record = None
    try:
        record = _sidecar(root)
    except DatasetError as exc:
        warnings.append(str(exc))
    if record is None:
        message = f"no ground truth at {(root / GROUND_TRUTH_FILE).as_posix()}; truth columns omitted"
        logger.warning(message)
        warnings.append(message)
    evaluation = evaluate_result(result, record, config) if record is not None else None
    markdown = render_summary(result, evaluation, record, warnings)
    destination = Path(output_file or run_dir / SUMMARY_FILE)
    destination.parent.mkdir(parents=True, exist_ok=True)
    destination.write_text(markdown, encoding="utf-8")
    write_plot_tables(result.iterations, run_dir)
    return ReportOutcome(destination, markdown, evaluation, warnings)
