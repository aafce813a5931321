from typing import Literal

from pydantic import BaseModel, Field

TrajectoryKind = Literal["sinusoidal", "figure8", "alternating"]
MountingCase = Literal["A", "B", "C"]


class ExtrinsicErrors(BaseModel):
    translation_cm: list[float]
    rotation_deg: list[float]
    time_offset_ms: list[float] = Field(default_factory=list)
    translation_rmse_cm: float = 0.0
    rotation_rmse_deg: float = 0.0


class ImuIntrinsicErrors(BaseModel):
    gyro_scale: list[float]
    gyro_misalignment: list[float]
    accel_scale: list[float]
    accel_misalignment: list[float]
    gyro_rotation_deg: list[float]


class LidarIntrinsicErrors(BaseModel):
    d_elevation_deg: float
    d_azimuth_deg: float
    vertical_mm: float
    horizontal_mm: float
    scale_percent: float
    range_offset_mm: float


class AcceptanceVerdict(BaseModel):
    passed: bool
    failures: list[str] = Field(default_factory=list)


class CalibrationReport(BaseModel):
    extrinsics: ExtrinsicErrors
    imu: ImuIntrinsicErrors | None = None
    lidar: LidarIntrinsicErrors | None = None
    verdict: AcceptanceVerdict | None = None


class ExtrinsicEstimate(BaseModel):
    rotation_xyzw: list[float]
    rotation_euler_deg: list[float]
    translation: list[float]
    time_offsets: list[float]
    rotation_std_deg: list[float] = Field(default_factory=list)
    translation_std: list[float] = Field(default_factory=list)
    time_offset_std: list[float] = Field(default_factory=list)


class ImuIntrinsicEstimate(BaseModel):
    gyro_scale: list[float]
    gyro_misalignment: list[float]
    accel_scale: list[float]
    accel_misalignment: list[float]
    gyro_rotation_xyzw: list[float]
    gyro_rotation_euler_deg: list[float]


class LidarBeamEstimate(BaseModel):
    beam: int
    elevation_deg: float
    d_elevation_deg: float
    d_azimuth_deg: float
    vertical: float
    horizontal: float
    scale: float
    range_offset: float


class NavEstimate(BaseModel):
    segment: int
    t_start: float
    t_end: float
    gravity: list[float]
    gyro_bias: list[float]
    accel_bias: list[float]


class IterationRecord(BaseModel):
    iteration: int
    cost: float
    cost_by_kind: dict[str, float] = Field(default_factory=dict)
    num_associations: int = 0
    num_surfels: int = 0
    mme: float | None = None
    mme_skipped: int = 0
    active_blocks: list[str] = Field(default_factory=list)
    raw_correction: bool = False
    singular_values: list[float] = Field(default_factory=list)
    retained_rank: int = 0
    dropped_directions: list[list[float]] = Field(default_factory=list)
    accepted_steps: int = 0
    damping: float = 0.0
    parameters: dict[str, float] = Field(default_factory=dict)


class StageTiming(BaseModel):
    stage: str
    seconds: float


class CalibrationResult(BaseModel):
    generated_at: str
    dataset: str
    converged: bool
    stopped_early: bool = False
    diagnostic: str | None = None
    extrinsics: ExtrinsicEstimate
    imu: ImuIntrinsicEstimate
    lidar: list[LidarBeamEstimate] = Field(default_factory=list)
    navigation: list[NavEstimate] = Field(default_factory=list)
    iterations: list[IterationRecord] = Field(default_factory=list)
    timings: list[StageTiming] = Field(default_factory=list)
    warnings: list[str] = Field(default_factory=list)
    evaluation: CalibrationReport | None = None


class SegmentRecord(BaseModel):
    index: int
    t_start: float
    t_end: float
    min_singular_value: float
    singular_values: list[float]
    direction: list[float]
    informative: bool
    prior_added: bool = False
    mode: str = "reduced"


class SegmentRanking(BaseModel):
    generated_at: str
    dataset: str
    threshold: float
    max_segments: int
    selected: list[int] = Field(default_factory=list)
    segments: list[SegmentRecord] = Field(default_factory=list)
    joint_calibration: CalibrationResult | None = None


class GroundTruthRecord(BaseModel):
    seed: int
    trajectory: TrajectoryKind
    mounting: MountingCase
    duration: float
    segment_length: float
    blend_time: float
    gravity: list[float]
    extrinsic_rotation_xyzw: list[float]
    extrinsic_translation: list[float]
    time_offset: float
    gyro_bias: list[float]
    accel_bias: list[float]
    imu: ImuIntrinsicEstimate
    lidar: list[LidarBeamEstimate]
    unobservable_direction: list[float]
    imu_rate_hz: float
    scan_period: float
