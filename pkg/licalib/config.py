"""Run configuration loader.

The toolkit reads a public `config.yml` file and maps its nested sections to a
typed `RunConfig` model. Values are layered as defaults, then the YAML file,
then `LICALIB_<SECTION>__<KEY>` environment variables, then `--section.key value`
command-line overrides.
"""

from __future__ import annotations

import os
from functools import lru_cache
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from licalib.errors import ConfigError

BASE_DIR = Path(__file__).resolve().parent.parent
CONFIG_PATH = BASE_DIR / "config.yml"
ENV_PREFIX = "LICALIB_"
SNAPSHOT_NAME = "config.snapshot.yml"


class _Section(BaseModel):
    model_config = ConfigDict(extra="ignore")


class DatasetConfig(_Section):
    root: str = "data/sim"
    output_dir: str = "runs/latest"
    lidar_format: Literal["auto", "raw", "xyz"] = "auto"


class TrajectoryConfig(_Section):
    knot_spacing: float = Field(default=0.05, gt=0.0)


class ImuConfig(_Section):
    rate_hz: float = Field(default=400.0, gt=0.0)
    gyro_noise_density: float = Field(default=1.745e-4, gt=0.0)
    accel_noise_density: float = Field(default=5.9e-4, gt=0.0)
    gyro_bias_walk: float = Field(default=2e-5, ge=0.0)
    accel_bias_walk: float = Field(default=5e-4, ge=0.0)
    gravity_norm: float = Field(default=9.8, gt=0.0)
    sample_stride: int = Field(default=1, ge=1)


class LidarConfig(_Section):
    num_beams: int = Field(default=16, ge=1)
    elevation_min_deg: float = -15.0
    elevation_max_deg: float = 15.0
    range_noise: float = Field(default=0.01, gt=0.0)
    min_range: float = Field(default=0.5, ge=0.0)
    point_stride: int = Field(default=16, ge=1)
    incidence_floor: float = Field(default=0.1, gt=0.0, le=1.0)
    huber_delta: float = Field(default=0.02, gt=0.0)

    @model_validator(mode="after")
    def _elevation_order(self) -> LidarConfig:
        if self.elevation_max_deg < self.elevation_min_deg:
            raise ValueError("elevation_max_deg must not be below elevation_min_deg")
        return self


class SurfelConfig(_Section):
    cell_size: float = Field(default=0.5, gt=0.0)
    plane_likeness_threshold: float = Field(default=0.6, ge=0.0, le=1.0)
    min_points: int = Field(default=20, ge=3)
    association_gate: float = Field(default=0.05, gt=0.0)
    dump_csv: bool = False


class OdometryConfig(_Section):
    mode: Literal["ground-truth-perturbed", "plane-icp"] = "plane-icp"
    rotation_sigma_deg: float = Field(default=0.2, ge=0.0)
    translation_sigma: float = Field(default=0.01, ge=0.0)
    keyframe_translation: float = Field(default=0.3, ge=0.0)
    keyframe_rotation_deg: float = Field(default=5.0, ge=0.0)
    voxel_size: float = Field(default=0.2, gt=0.0)
    normal_neighbors: int = Field(default=10, ge=3)
    max_correspondence: float = Field(default=0.5, gt=0.0)
    max_iterations: int = Field(default=20, ge=1)
    divergence_rms: float = Field(default=0.1, gt=0.0)
    two_pass: bool = True
    seed: int = 7


class PerturbationConfig(_Section):
    rotation_deg: float = Field(default=0.0, ge=0.0)
    translation_m: float = Field(default=0.0, ge=0.0)
    seed: int = 0


class SolverConfig(_Section):
    max_iterations: int = Field(default=14, ge=1)
    inner_iterations: int = Field(default=3, ge=1)
    intrinsic_start_iteration: int = Field(default=2, ge=0)
    raw_correction_iteration: int = Field(default=11, ge=0)
    calibrate_intrinsics: bool = True
    use_tsvd: bool = True
    tsvd_relative_threshold: float = Field(default=1e-3, gt=0.0)
    tsvd_absolute_threshold: float | None = Field(default=None, gt=0.0)
    time_offset_bound: float = Field(default=0.1, gt=0.0)
    initial_damping_ratio: float = Field(default=1e-4, gt=0.0)
    damping_increase: float = Field(default=5.0, gt=1.0)
    damping_decrease: float = Field(default=0.3, gt=0.0, lt=1.0)
    max_damping_ratio: float = Field(default=1e8, gt=0.0)
    rotation_pair_min_angle_deg: float = Field(default=0.5, ge=0.0)
    translation_ridge: float = Field(default=1e-6, ge=0.0)
    translation_smoothness: float = Field(default=1e-3, ge=0.0)
    initial_translation: list[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    initial_extrinsic_perturbation: PerturbationConfig = Field(default_factory=PerturbationConfig)

    @model_validator(mode="after")
    def _schedule_order(self) -> SolverConfig:
        if self.raw_correction_iteration < self.intrinsic_start_iteration:
            raise ValueError("raw_correction_iteration must not precede intrinsic_start_iteration")
        if len(self.initial_translation) != 3:
            raise ValueError("initial_translation must have three components")
        return self


class SegmentsConfig(_Section):
    length: float = Field(default=15.0, gt=0.0)
    sigma_threshold: float = Field(default=100.0, ge=0.0)
    max_segments: int = Field(default=2, ge=1)
    mode: Literal["reduced", "full"] = "reduced"
    calibration_iterations: int = Field(default=3, ge=1)
    joint_calibration: bool = False


class LidarIntrinsicSigma(_Section):
    elevation_deg: float = Field(default=0.1, ge=0.0)
    azimuth_deg: float = Field(default=0.05, ge=0.0)
    vertical_offset: float = Field(default=0.005, ge=0.0)
    horizontal_offset: float = Field(default=0.005, ge=0.0)
    range_scale: float = Field(default=5e-5, ge=0.0)
    range_offset: float = Field(default=0.01, ge=0.0)


class ImuIntrinsicSigma(_Section):
    gyro_scale: float = Field(default=1e-4, ge=0.0)
    accel_scale: float = Field(default=1e-3, ge=0.0)
    gyro_misalignment_deg: float = Field(default=0.05, ge=0.0)
    accel_misalignment_deg: float = Field(default=0.05, ge=0.0)


class SimulationConfig(_Section):
    seed: int = 0
    duration: float = Field(default=10.0, gt=0.0)
    trajectory: Literal["sinusoidal", "figure8", "alternating"] = "sinusoidal"
    mounting: Literal["A", "B", "C"] = "A"
    time_offset: float = 0.0
    scan_period: float = Field(default=0.1, gt=0.0)
    azimuth_step_deg: float = Field(default=0.2, gt=0.0)
    distortion: bool = True
    imu_noise: bool = True
    lidar_noise: bool = True
    randomize_intrinsics: bool = True
    lidar_sigma: LidarIntrinsicSigma = Field(default_factory=LidarIntrinsicSigma)
    imu_sigma: ImuIntrinsicSigma = Field(default_factory=ImuIntrinsicSigma)
    extrinsic_translation: list[float] = Field(default_factory=lambda: [0.3, 0.15, 0.05])
    extrinsic_rotation_deg: list[float] = Field(default_factory=lambda: [1.0, 2.0, 5.0])
    gyro_rotation_deg: list[float] = Field(default_factory=lambda: [0.8, 0.5, 0.3])
    gyro_bias: list[float] = Field(default_factory=lambda: [0.002, -0.001, 0.0015])
    accel_bias: list[float] = Field(default_factory=lambda: [0.02, -0.015, 0.01])
    segment_length: float = Field(default=15.0, gt=0.0)
    blend_time: float = Field(default=1.5, ge=0.0)

    @model_validator(mode="after")
    def _vector_sizes(self) -> SimulationConfig:
        for name in (
            "extrinsic_translation",
            "extrinsic_rotation_deg",
            "gyro_rotation_deg",
            "gyro_bias",
            "accel_bias",
        ):
            if len(getattr(self, name)) != 3:
                raise ValueError(f"{name} must have three components")
        return self


class MetricsConfig(_Section):
    mme_radius: float = Field(default=0.3, gt=0.0)
    mme_min_neighbors: int = Field(default=5, ge=4)
    mme_max_points: int = Field(default=20000, ge=1)
    max_translation_error_cm: float = Field(default=1.0, gt=0.0)
    max_rotation_error_deg: float = Field(default=0.5, gt=0.0)
    max_time_offset_error_ms: float = Field(default=0.5, gt=0.0)
    max_imu_scale_error: float = Field(default=0.005, gt=0.0)
    max_imu_misalignment_error: float = Field(default=0.005, gt=0.0)
    max_gyro_rotation_error_deg: float = Field(default=0.1, gt=0.0)
    max_lidar_angle_error_deg: float = Field(default=0.02, gt=0.0)
    max_lidar_offset_error_mm: float = Field(default=2.0, gt=0.0)
    max_lidar_scale_error_percent: float = Field(default=0.02, gt=0.0)


class RunConfig(BaseModel):
    """Typed configuration for simulation, calibration and reporting runs."""

    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    trajectory: TrajectoryConfig = Field(default_factory=TrajectoryConfig)
    imu: ImuConfig = Field(default_factory=ImuConfig)
    lidar: LidarConfig = Field(default_factory=LidarConfig)
    surfel: SurfelConfig = Field(default_factory=SurfelConfig)
    odometry: OdometryConfig = Field(default_factory=OdometryConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    segments: SegmentsConfig = Field(default_factory=SegmentsConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)

    model_config = ConfigDict(extra="ignore")

    def write_snapshot(self, directory: Path) -> Path:
        """Write the resolved configuration beside run outputs."""

        directory.mkdir(parents=True, exist_ok=True)
        path = directory / SNAPSHOT_NAME
        payload = self.model_dump(mode="json")
        path.write_text(yaml.safe_dump(payload, sort_keys=False), encoding="utf-8")
        return path


def _read_yaml_config(path: Path) -> dict[str, Any]:
    """Load a YAML config file into a dictionary.

    Returns an empty mapping when the file does not exist.
    """

    if not path.exists():
        return {}
    with path.open("r", encoding="utf-8") as fp:
        try:
            raw = yaml.safe_load(fp) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path.as_posix()}: invalid YAML ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path.as_posix()}: root must be an object")
    return raw


def _set_dotted(target: dict[str, Any], dotted: str, value: Any) -> None:
    parts = [part for part in dotted.split(".") if part]
    if not parts:
        raise ConfigError(f"empty configuration key in override {dotted!r}")
    node = target
    for part in parts[:-1]:
        child = node.get(part)
        if not isinstance(child, dict):
            child = {}
            node[part] = child
        node = child
    node[parts[-1]] = value


def _parse_scalar(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def _env_override_map(environ: dict[str, str] | None = None) -> dict[str, Any]:
    """Read `LICALIB_SECTION__KEY=value` overrides from the environment."""

    source = os.environ if environ is None else environ
    overrides: dict[str, Any] = {}
    for name, value in sorted(source.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        dotted = name[len(ENV_PREFIX) :].lower().replace("__", ".")
        _set_dotted(overrides, dotted, _parse_scalar(value))
    return overrides


def parse_cli_overrides(tokens: list[str]) -> dict[str, Any]:
    """Turn `--section.key value` / `--section.key=value` tokens into a nested mapping."""

    overrides: dict[str, Any] = {}
    index = 0
    while index < len(tokens):
        token = tokens[index]
        if not token.startswith("--") or "." not in token:
            raise ConfigError(f"unrecognized override {token!r}; expected --section.key value")
        key = token[2:]
        if "=" in key:
            key, text = key.split("=", 1)
            index += 1
        else:
            if index + 1 >= len(tokens):
                raise ConfigError(f"override {token!r} is missing a value")
            text = tokens[index + 1]
            index += 2
        _set_dotted(overrides, key.replace("-", "_"), _parse_scalar(text))
    return overrides


def _deep_merge(base: dict[str, Any], extra: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _format_validation_error(exc: ValidationError) -> str:
    messages = []
    for error in exc.errors():
        location = ".".join(str(part) for part in error["loc"]) or "<root>"
        messages.append(f"{location}: {error['msg']}")
    return "; ".join(messages)


def build_config(raw: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_validation_error(exc)) from exc


def apply_overrides(config: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Return a re-validated copy of ``config`` with nested ``overrides`` merged in."""

    if not overrides:
        return config
    return build_config(_deep_merge(config.model_dump(mode="json"), overrides))


def load_config(
    path: Path | None = None,
    overrides: dict[str, Any] | None = None,
    environ: dict[str, str] | None = None,
) -> RunConfig:
    """Resolve defaults, YAML, environment and explicit overrides into a `RunConfig`."""

    raw = _read_yaml_config(path or CONFIG_PATH)
    raw = _deep_merge(raw, _env_override_map(environ))
    if overrides:
        raw = _deep_merge(raw, overrides)
    return build_config(raw)


@lru_cache
def get_settings() -> RunConfig:
    """Return the cached configuration for the repository `config.yml`."""

    return load_config()
