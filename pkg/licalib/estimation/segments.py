"""Per-segment information analysis and informative-segment selection."""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import linalg

from licalib.errors import InsufficientDataError, InvalidArgumentError
from licalib.estimation.residuals import ResidualBlock
from licalib.estimation.solver import (
    NormalSystem,
    assemble_normal_system,
    schur_complement,
    symmetric_spectrum,
)
from licalib.estimation.state import StateLayout
from licalib.geometry import FloatArray

logger = logging.getLogger(__name__)

InformationMode = Literal["reduced", "full"]
SCHUR_PRIOR_RATIO = 1e-8
EXTRINSIC_LABELS = ("rot_x", "rot_y", "rot_z", "trans_x", "trans_y", "trans_z")


@dataclass(slots=True)
class SegmentInfo:
    """Information summary of one time segment over the extrinsic block."""

    index: int
    t_start: float
    t_end: float
    singular_values: FloatArray
    min_singular_value: float
    direction: FloatArray
    mode: InformationMode = "reduced"
    prior_added: bool = False
    informative: bool = False

    @property
    def condition_ratio(self) -> float:
        top = float(self.singular_values[0]) if self.singular_values.size else 0.0
        return self.min_singular_value / top if top > 0.0 else 0.0


@dataclass(slots=True)
class SegmentSelection:
    selected: list[int]
    threshold: float
    max_segments: int
    infos: list[SegmentInfo] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.selected


def split_segments(t_start: float, t_end: float, length: float) -> list[tuple[float, float]]:
    """Constant-length windows over ``[t_start, t_end]``; a tail shorter than half a window is dropped."""

    if length <= 0.0:
        raise InvalidArgumentError("segment length must be positive")
    duration = t_end - t_start
    if duration <= 0.0:
        raise InsufficientDataError("segment split needs a positive time span")
    count = int(np.floor(duration / length + 1e-9))
    windows = [(t_start + k * length, t_start + (k + 1) * length) for k in range(count)]
    tail = duration - count * length
    if not windows or tail >= 0.5 * length:
        windows.append((t_start + count * length, t_end))
    return windows


def _canonical_sign(vector: FloatArray) -> FloatArray:
    pivot = int(np.argmax(np.abs(vector)))
    return vector if vector[pivot] >= 0.0 else -vector


def extrinsic_information(
    system: NormalSystem, layout: StateLayout, mode: InformationMode = "reduced"
) -> tuple[FloatArray, FloatArray, bool]:
    """Singular values and minimum-information direction of the extrinsic block.

    Returns ``(sigma, direction, prior_added)``; ``direction`` is a unit
    6-vector ordered ``[rotation, translation]``.
    """

    ext_cols = layout.extrinsic_columns
    if ext_cols.size != 6:
        raise InvalidArgumentError("segment information needs both extrinsic blocks active")
    if mode == "full":
        sigma, vectors = symmetric_spectrum(system.information)
        restricted = vectors[ext_cols, -1]
        norm = float(np.linalg.norm(restricted))
        direction = restricted / norm if norm > 0.0 else np.eye(6)[-1]
        return sigma, _canonical_sign(direction), False
    if mode != "reduced":
        raise InvalidArgumentError(f"unknown information mode {mode!r}")

    prior_added = False
    try:
        reduced, *_ = schur_complement(system.information, ext_cols)
    except linalg.LinAlgError:
        rest = np.setdiff1d(np.arange(system.size), ext_cols)
        diag = np.diag(system.information)[rest]
        prior = SCHUR_PRIOR_RATIO * (float(np.mean(diag)) if diag.size and np.mean(diag) > 0 else 1.0)
        logger.warning("segment information: singular Schur pivot, adding prior %.3g", prior)
        reduced, *_ = schur_complement(system.information, ext_cols, prior)
        prior_added = True
    sigma, vectors = symmetric_spectrum(reduced)
    return sigma, _canonical_sign(vectors[:, -1]), prior_added


def segment_information(
    blocks: Iterable[ResidualBlock],
    layout: StateLayout,
    index: int = 0,
    time_range: tuple[float, float] = (0.0, 0.0),
    huber_delta: float | None = None,
    mode: InformationMode = "reduced",
) -> SegmentInfo:
    """Assemble one segment's information matrix and summarize its extrinsic observability."""

    system = assemble_normal_system(blocks, layout.size, huber_delta)
    if system.num_residuals == 0:
        raise InsufficientDataError(f"segment {index} has no residuals")
    sigma, direction, prior_added = extrinsic_information(system, layout, mode)
    min_sigma = float(sigma[-1]) if sigma.size else 0.0
    logger.info(
        "segment %d [%.2f, %.2f] min singular value %.4g direction %s",
        index,
        time_range[0],
        time_range[1],
        min_sigma,
        np.array2string(direction, precision=4),
    )
    return SegmentInfo(index, time_range[0], time_range[1], sigma, min_sigma, direction, mode, prior_added)


def select_segments(infos: Sequence[SegmentInfo], threshold: float, max_segments: int) -> SegmentSelection:
    """Segments with minimum singular value strictly above ``threshold``, best first."""

    if max_segments < 1:
        raise InvalidArgumentError("max_segments must be at least 1")
    candidates = [info for info in infos if info.min_singular_value > threshold]
    candidates.sort(key=lambda info: (-info.min_singular_value, info.index))
    chosen = [info.index for info in candidates[:max_segments]]
    for info in infos:
        info.informative = info.min_singular_value > threshold
    if not chosen:
        logger.warning("no segment exceeds the information threshold %.4g", threshold)
    return SegmentSelection(chosen, threshold, max_segments, list(infos))
