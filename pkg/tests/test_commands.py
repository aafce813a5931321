import csv
import json
from pathlib import Path

import numpy as np
import pytest

from licalib.commands import (
    DROPPED_FILE,
    EXIT_CONFIG,
    EXIT_PIPELINE,
    ITERATIONS_FILE,
    RESULT_FILE,
    SPECTRUM_FILE,
    SUMMARY_FILE,
    cmd_report,
    cmd_simulate,
    exit_code_for,
    load_result,
    render_summary,
)
from licalib.config import SNAPSHOT_NAME, RunConfig, build_config
from licalib.dataset import GROUND_TRUTH_FILE, IMU_FILE, SCAN_INDEX_FILE, read_dataset, read_ground_truth
from licalib.errors import (
    ConfigError,
    ConvergenceError,
    DatasetError,
    InsufficientDataError,
    PipelineError,
)
from licalib.geometry import matrix_to_euler, quat_to_matrix
from licalib.schemas import (
    CalibrationResult,
    ExtrinsicEstimate,
    GroundTruthRecord,
    IterationRecord,
    StageTiming,
)


def _config(**dataset: object) -> RunConfig:
    simulation = {"duration": 1.0, "azimuth_step_deg": 2.0, "seed": 5}
    return build_config({"simulation": simulation, "dataset": dataset})


def _iteration() -> IterationRecord:
    return IterationRecord(
        iteration=0,
        cost=12.5,
        num_associations=800,
        num_surfels=40,
        mme=-1.5,
        singular_values=[3.0, 2.0, 1e-9],
        retained_rank=2,
        dropped_directions=[[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]],
        accepted_steps=3,
        damping=0.01,
        parameters={"ext.tx": 0.3, "ext.ty": 0.15},
    )


def _result(record: GroundTruthRecord, dataset: Path, translation_error: float = 0.0) -> CalibrationResult:
    euler = np.degrees(matrix_to_euler(quat_to_matrix(record.extrinsic_rotation_xyzw))).tolist()
    translation = list(record.extrinsic_translation)
    translation[0] += translation_error
    return CalibrationResult(
        generated_at="2026-01-01T00:00:00+00:00",
        dataset=dataset.as_posix(),
        converged=True,
        extrinsics=ExtrinsicEstimate(
            rotation_xyzw=record.extrinsic_rotation_xyzw,
            rotation_euler_deg=euler,
            translation=translation,
            time_offsets=[record.time_offset],
            rotation_std_deg=[0.01, 0.01, 0.02],
            translation_std=[0.001, 0.001, 0.002],
            time_offset_std=[1e-5],
        ),
        imu=record.imu,
        lidar=record.lidar,
        iterations=[_iteration()],
        timings=[StageTiming(stage="initialize", seconds=1.25)],
    )


def _write_result(result: CalibrationResult, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(result.model_dump(mode="json"), indent=2, ensure_ascii=False)
    (run_dir / RESULT_FILE).write_text(payload, encoding="utf-8")


@pytest.fixture(scope="module")
def simulated(tmp_path_factory: pytest.TempPathFactory) -> Path:
    return cmd_simulate(_config(), tmp_path_factory.mktemp("sim"))


def test_simulate_writes_dataset_sidecar_and_snapshot(simulated: Path) -> None:
    for name in (IMU_FILE, SCAN_INDEX_FILE, GROUND_TRUTH_FILE, SNAPSHOT_NAME):
        assert (simulated / name).exists(), name
    dataset = read_dataset(simulated)
    assert dataset.lidar_format == "raw"
    assert len(dataset.scans) == 10
    record = read_ground_truth(simulated / GROUND_TRUTH_FILE)
    assert record.seed == 5
    assert record.trajectory == "sinusoidal"


def test_simulate_can_write_cartesian_scans(tmp_path: Path) -> None:
    directory = cmd_simulate(_config(lidar_format="xyz"), tmp_path / "xyz")
    dataset = read_dataset(directory)
    assert dataset.lidar_format == "xyz"
    assert dataset.scans[0].points is not None


def test_report_compares_against_sidecar(simulated: Path, tmp_path: Path) -> None:
    record = read_ground_truth(simulated / GROUND_TRUTH_FILE)
    run_dir = tmp_path / "run"
    _write_result(_result(record, simulated), run_dir)

    outcome = cmd_report(run_dir)

    assert outcome.summary_path == run_dir / SUMMARY_FILE
    assert outcome.summary_path.read_text(encoding="utf-8") == outcome.markdown
    assert outcome.evaluation is not None
    assert outcome.evaluation.extrinsics.translation_rmse_cm == pytest.approx(0.0, abs=1e-9)
    assert outcome.passed
    assert "| Parameter | Estimate | Std | Truth | Error |" in outcome.markdown
    assert "Acceptance: **pass**" in outcome.markdown
    assert "- initialize: 1.25 s" in outcome.markdown
    assert outcome.warnings == []


def test_report_flags_threshold_failure(simulated: Path, tmp_path: Path) -> None:
    record = read_ground_truth(simulated / GROUND_TRUTH_FILE)
    run_dir = tmp_path / "run"
    _write_result(_result(record, simulated, translation_error=0.05), run_dir)

    outcome = cmd_report(run_dir, output_file=tmp_path / "out" / "summary.md")

    assert not outcome.passed
    assert outcome.evaluation is not None
    assert outcome.evaluation.verdict is not None
    assert len(outcome.evaluation.verdict.failures) == 1
    assert "translation[x]" in outcome.evaluation.verdict.failures[0]
    assert "Acceptance: **fail**" in outcome.markdown
    assert (tmp_path / "out" / "summary.md").exists()


def test_report_judges_intrinsic_errors(simulated: Path, tmp_path: Path) -> None:
    record = read_ground_truth(simulated / GROUND_TRUTH_FILE)
    result = _result(record, simulated)
    scale = [record.imu.gyro_scale[0] + 0.01, *record.imu.gyro_scale[1:]]
    result.imu = record.imu.model_copy(update={"gyro_scale": scale})
    run_dir = tmp_path / "run"
    _write_result(result, run_dir)

    outcome = cmd_report(run_dir)

    assert not outcome.passed
    assert outcome.evaluation is not None
    assert outcome.evaluation.verdict is not None
    assert [failure.split(" ")[0] for failure in outcome.evaluation.verdict.failures] == ["gyro_scale[0]"]


def test_report_without_ground_truth_omits_truth_columns(simulated: Path, tmp_path: Path) -> None:
    record = read_ground_truth(simulated / GROUND_TRUTH_FILE)
    run_dir = tmp_path / "run"
    empty = tmp_path / "real"
    empty.mkdir()
    _write_result(_result(record, simulated), run_dir)

    outcome = cmd_report(run_dir, dataset_dir=empty)

    assert outcome.evaluation is None
    assert outcome.passed
    assert "| Parameter | Estimate | Std |" in outcome.markdown
    assert "Truth" not in outcome.markdown
    assert len(outcome.warnings) == 1
    assert "no ground truth" in outcome.warnings[0]
    assert "no ground truth" in outcome.markdown


def test_report_refreshes_plot_tables(simulated: Path, tmp_path: Path) -> None:
    record = read_ground_truth(simulated / GROUND_TRUTH_FILE)
    run_dir = tmp_path / "run"
    _write_result(_result(record, simulated), run_dir)

    cmd_report(run_dir)

    with (run_dir / ITERATIONS_FILE).open(encoding="utf-8") as fp:
        rows = list(csv.DictReader(fp))
    assert len(rows) == 1
    assert float(rows[0]["ext.tx"]) == pytest.approx(0.3)
    assert float(rows[0]["mme"]) == pytest.approx(-1.5)
    with (run_dir / SPECTRUM_FILE).open(encoding="utf-8") as fp:
        spectrum = list(csv.DictReader(fp))
    assert [row["retained"] for row in spectrum] == ["1", "1", "0"]
    with (run_dir / DROPPED_FILE).open(encoding="utf-8") as fp:
        dropped = list(csv.DictReader(fp))
    assert float(dropped[0]["trans_z"]) == pytest.approx(1.0)


def test_missing_or_invalid_result_is_dataset_error(tmp_path: Path) -> None:
    with pytest.raises(DatasetError, match="file not found"):
        load_result(tmp_path)
    (tmp_path / RESULT_FILE).write_text("{\"converged\": true}", encoding="utf-8")
    with pytest.raises(DatasetError, match="invalid calibration result"):
        load_result(tmp_path)


def test_summary_renders_without_iterations(simulated: Path) -> None:
    record = read_ground_truth(simulated / GROUND_TRUTH_FILE)
    result = _result(record, simulated).model_copy(update={"iterations": [], "timings": []})
    markdown = render_summary(result, None, None, ["odometry degraded"])
    assert "Outer iterations: 0" in markdown
    assert "Map entropy" not in markdown
    assert "### Timing" not in markdown
    assert "- odometry degraded" in markdown


def test_exit_codes_follow_failure_class() -> None:
    assert exit_code_for(ConfigError("bad key")) == EXIT_CONFIG
    assert exit_code_for(DatasetError("missing file")) == EXIT_CONFIG
    assert exit_code_for(PipelineError("odometry", "diverged")) == EXIT_PIPELINE
    assert exit_code_for(ConvergenceError("damping")) == EXIT_PIPELINE
    assert exit_code_for(InsufficientDataError("no pairs")) == EXIT_PIPELINE
