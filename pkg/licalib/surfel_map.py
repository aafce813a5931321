"""Point cloud map assembly, planar surfel extraction and point-to-surfel association.

Cells are axis-aligned cubes of side ``cell_size`` keyed by integer grid
coordinates. A cell becomes a surfel when it holds enough points and its
covariance is plane-like; the plane satisfies ``n^T p + d = 0`` with ``n``
oriented away from the origin.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike

from licalib.errors import InvalidArgumentError
from licalib.geometry import FloatArray

logger = logging.getLogger(__name__)

_KEY_BITS = 20
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
NEIGHBOR_OFFSETS = np.array([o for o in product((-1, 0, 1), repeat=3) if any(o)], dtype=np.int64)


@dataclass(slots=True)
class PosedScan:
    """LiDAR-frame points with a map-from-LiDAR pose per point (or one pose for the scan)."""

    points: FloatArray
    rotation: FloatArray
    translation: FloatArray
    times: FloatArray | None = None
    beams: np.ndarray | None = None
    scan_id: int = 0


@dataclass(slots=True)
class MapCloud:
    """Map-frame points tagged with their source scan, beam and timestamp."""

    points: FloatArray
    scan_ids: np.ndarray
    beams: np.ndarray
    times: FloatArray

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> MapCloud:
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.zeros(0))


@dataclass(frozen=True, slots=True)
class SurfelPlane:
    """Closest-point plane of one cell; ``closest_point`` is ``|d| n``."""

    normal: FloatArray
    offset: float
    closest_point: FloatArray
    likeness: float
    cell: tuple[int, int, int]
    members: np.ndarray

    @property
    def num_points(self) -> int:
        return len(self.members)


@dataclass(slots=True)
class SurfelMap:
    planes: list[SurfelPlane]
    cell_size: float
    normals: FloatArray
    offsets: FloatArray
    codes: np.ndarray

    def __len__(self) -> int:
        return len(self.planes)

    @classmethod
    def from_planes(cls, planes: list[SurfelPlane], cell_size: float) -> SurfelMap:
        if not planes:
            return cls([], cell_size, np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64))
        cells = np.array([plane.cell for plane in planes], dtype=np.int64)
        return cls(
            planes,
            cell_size,
            np.array([plane.normal for plane in planes]),
            np.array([plane.offset for plane in planes]),
            encode_cells(cells),
        )

    def lookup(self, codes: np.ndarray) -> np.ndarray:
        """Surfel index of each cell code, ``-1`` where the cell holds no surfel."""

        if self.codes.size == 0:
            return np.full(len(codes), -1, dtype=int)
        pos = np.clip(np.searchsorted(self.codes, codes), 0, len(self.codes) - 1)
        return np.where(self.codes[pos] == codes, pos, -1)


@dataclass(slots=True)
class Associations:
    """Point-to-surfel pairs; ``distance`` is the signed ``n^T p + d``."""

    point_index: np.ndarray
    plane_index: np.ndarray
    distance: FloatArray

    def __len__(self) -> int:
        return len(self.point_index)


def encode_cells(cells: np.ndarray) -> np.ndarray:
    shifted = np.asarray(cells, dtype=np.int64) + _KEY_OFFSET
    return (shifted[:, 0] << (2 * _KEY_BITS)) | (shifted[:, 1] << _KEY_BITS) | shifted[:, 2]


def cell_indices(points: FloatArray, cell_size: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=float) / cell_size).astype(np.int64)


def build_map(scans: Sequence[PosedScan]) -> MapCloud:
    """Transform every scan into the map frame and stack the results."""

    if not scans:
        return MapCloud.empty()
    points, scan_ids, beams, times = [], [], [], []
    for scan in scans:
        local = np.asarray(scan.points, dtype=float).reshape(-1, 3)
        rotation = np.asarray(scan.rotation, dtype=float)
        if rotation.ndim == 2:
            mapped = local @ rotation.T + scan.translation
        else:
            mapped = np.einsum("nab,nb->na", rotation, local) + scan.translation
        points.append(mapped)
        scan_ids.append(np.full(len(local), scan.scan_id, dtype=int))
        beams.append(np.zeros(len(local), dtype=int) if scan.beams is None else np.asarray(scan.beams))
        times.append(np.zeros(len(local)) if scan.times is None else np.asarray(scan.times, dtype=float))
    return MapCloud(np.vstack(points), np.concatenate(scan_ids), np.concatenate(beams), np.concatenate(times))


def plane_likeness(eigenvalues: ArrayLike) -> tuple[float, bool]:
    """``P = 2 (l1 - l0) / (l0 + l1 + l2)`` for ascending eigenvalues; ``(0, True)`` when all vanish."""

    lam = np.asarray(eigenvalues, dtype=float)
    if lam.shape != (3,) or np.any(lam < 0.0):
        raise InvalidArgumentError("plane likeness needs three non-negative eigenvalues")
    total = float(lam.sum())
    if total <= 0.0:
        return 0.0, True
    return 2.0 * float(lam[1] - lam[0]) / total, False


def _batched_likeness(eigenvalues: FloatArray) -> FloatArray:
    total = eigenvalues.sum(axis=1)
    safe = np.where(total > 0.0, total, 1.0)
    return np.where(total > 0.0, 2.0 * (eigenvalues[:, 1] - eigenvalues[:, 0]) / safe, 0.0)


def extract_surfels(
    points: FloatArray,
    cell_size: float = 0.5,
    likeness_threshold: float = 0.6,
    min_points: int = 20,
) -> SurfelMap:
    """Fit a plane to every sufficiently populated, plane-like cell, in cell-key order."""

    if cell_size <= 0.0:
        raise InvalidArgumentError("cell_size must be positive")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return SurfelMap.from_planes([], cell_size)
    codes = encode_cells(cell_indices(points, cell_size))
    unique, inverse, counts = np.unique(codes, return_inverse=True, return_counts=True)
    dense = np.flatnonzero(counts >= min_points)
    if dense.size == 0:
        return SurfelMap.from_planes([], cell_size)

    sums = np.zeros((len(unique), 3))
    np.add.at(sums, inverse, points)
    centroids = sums / counts[:, None]
    centered = points - centroids[inverse]
    outer = np.zeros((len(unique), 3, 3))
    np.add.at(outer, inverse, centered[:, :, None] * centered[:, None, :])
    covariances = outer[dense] / counts[dense, None, None]
    eigenvalues, eigenvectors = np.linalg.eigh(covariances)
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    likeness = _batched_likeness(eigenvalues)

    order = np.argsort(inverse, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)])
    planes: list[SurfelPlane] = []
    for k, cell in enumerate(dense):
        if likeness[k] <= likeness_threshold:
            continue
        normal = eigenvectors[k][:, 0]
        centroid = centroids[cell]
        if normal @ centroid < 0.0:
            normal = -normal
        offset = -float(normal @ centroid)
        key = int(unique[cell])
        grid = (
            ((key >> (2 * _KEY_BITS)) & ((1 << _KEY_BITS) - 1)) - _KEY_OFFSET,
            ((key >> _KEY_BITS) & ((1 << _KEY_BITS) - 1)) - _KEY_OFFSET,
            (key & ((1 << _KEY_BITS) - 1)) - _KEY_OFFSET,
        )
        planes.append(
            SurfelPlane(
                normal=normal,
                offset=offset,
                closest_point=abs(offset) * normal,
                likeness=float(likeness[k]),
                cell=grid,
                members=order[starts[cell] : starts[cell + 1]],
            )
        )
    logger.debug("extracted %d surfels from %d dense cells", len(planes), dense.size)
    return SurfelMap.from_planes(planes, cell_size)


def associate(points: FloatArray, surfels: SurfelMap, gate: float = 0.05) -> Associations:
    """Pair points with the surfel of their own cell, else the closest surfel among the 26 neighbours.

    Points whose plane distance exceeds ``gate`` are discarded. Output is
    sorted by point index.
    """

    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0 or len(surfels) == 0:
        return Associations(np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.zeros(0))
    cells = cell_indices(points, surfels.cell_size)
    plane = surfels.lookup(encode_cells(cells))
    distance = np.full(len(points), np.inf)
    own = plane >= 0
    normals = surfels.normals[plane[own]]
    distance[own] = np.einsum("na,na->n", normals, points[own]) + surfels.offsets[plane[own]]
    unmatched = np.flatnonzero(~own)
    if unmatched.size:
        best = np.full(unmatched.size, -1)
        best_dist = np.full(unmatched.size, np.inf)
        for offset in NEIGHBOR_OFFSETS:
            candidate = surfels.lookup(encode_cells(cells[unmatched] + offset))
            hit = candidate >= 0
            if not np.any(hit):
                continue
            rows = np.flatnonzero(hit)
            idx = candidate[rows]
            dist = np.einsum("na,na->n", surfels.normals[idx], points[unmatched[rows]]) + surfels.offsets[idx]
            better = np.abs(dist) < np.abs(best_dist[rows])
            best[rows[better]] = idx[better]
            best_dist[rows[better]] = dist[better]
        plane[unmatched] = best
        distance[unmatched] = best_dist
    keep = np.flatnonzero((plane >= 0) & (np.abs(distance) <= gate))
    return Associations(keep, plane[keep], distance[keep])


def dump_surfels_csv(surfels: SurfelMap, path: Path) -> Path:
    """Write one row per surfel: cell, normal, offset, likeness and member count."""

    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["cell_x", "cell_y", "cell_z", "nx", "ny", "nz", "d", "likeness", "num_points"])
        for plane in surfels.planes:
            writer.writerow(
                [
                    *plane.cell,
                    *(f"{v:.9f}" for v in plane.normal),
                    f"{plane.offset:.9f}",
                    f"{plane.likeness:.6f}",
                    plane.num_points,
                ]
            )
    return path
