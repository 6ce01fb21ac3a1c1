"""Terrain mapping: point cloud -> segmented planes -> steppable height grid.

The pipeline is stateless per frame: crop the cloud to a region of interest,
downsample, extract near-horizontal planes with RANSAC, then rasterize the
accepted planes into a 2.5D grid of steppable cells. Synthetic clouds stand in
for a depth camera so every stage is reproducible from a seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCloud, EmptyScene, InvalidPose
from .geometry import point_cell_indices, rot2

FRAME_SENSOR = "sensor"
FRAME_BASE = "base"

GRID_SCHEMA_VERSION = 1


@dataclass
class PointCloud:
    """3D points in meters plus the frame they are expressed in."""

    points: np.ndarray
    frame_tag: str = FRAME_BASE

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.frame_tag not in (FRAME_SENSOR, FRAME_BASE):
            raise ValueError(f"unknown frame tag {self.frame_tag!r}")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class RegionOfInterest:
    """Horizontal crop box in the base frame.

    The box extends `length` meters forward of the origin and `width` meters
    across it, optionally rotated by `origin_yaw`.
    """

    length: float = 2.0
    width: float = 1.0
    origin_x: float = 0.0
    origin_y: float = 0.0
    origin_yaw: float = 0.0

    def __post_init__(self) -> None:
        if self.length <= 0 or self.width <= 0:
            raise ValueError("region of interest must have positive extent")

    def local_xy(self, points: np.ndarray) -> np.ndarray:
        xy = points[:, :2] - np.array([self.origin_x, self.origin_y])
        if self.origin_yaw != 0.0:
            xy = xy @ rot2(self.origin_yaw)
        return xy

    def mask(self, points: np.ndarray) -> np.ndarray:
        xy = self.local_xy(points)
        return (
            (xy[:, 0] >= 0.0)
            & (xy[:, 0] <= self.length)
            & (np.abs(xy[:, 1]) <= 0.5 * self.width)
        )


@dataclass(frozen=True)
class MappingConfig:
    roi: RegionOfInterest = field(default_factory=RegionOfInterest)
    voxel_downsample: float = 0.01
    ransac_dist_threshold: float = 0.01
    ransac_max_planes: int = 8
    ransac_min_inliers: int = 200
    ransac_iterations: int = 300
    max_tilt_deg: float = 15.0
    resolution: float = 0.01
    min_points_per_cell: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("voxel_downsample", "ransac_dist_threshold", "resolution"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.max_tilt_deg < 90.0:
            raise ValueError("max_tilt_deg must be in (0, 90)")


@dataclass
class Plane:
    """Plane n . p = d with its supporting inlier indices."""

    normal: np.ndarray
    offset: float
    inliers: np.ndarray
    mean_height: float

    def distances(self, points: np.ndarray) -> np.ndarray:
        return np.abs(points @ self.normal - self.offset)

    def height_at(self, x: float | np.ndarray, y: float | np.ndarray):
        """z of the plane at horizontal position (x, y)."""
        nz = self.normal[2]
        return (self.offset - self.normal[0] * x - self.normal[1] * y) / nz

    def tilt_deg(self) -> float:
        return math.degrees(math.acos(min(1.0, abs(self.normal[2]))))


@dataclass
class TerrainBox:
    """Axis-aligned terrain piece; only the top face is walkable."""

    box_id: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]

    @property
    def top_z(self) -> float:
        return self.center[2] + 0.5 * self.size[2]

    @property
    def x_range(self) -> tuple[float, float]:
        return self.center[0] - 0.5 * self.size[0], self.center[0] + 0.5 * self.size[0]

    @property
    def y_range(self) -> tuple[float, float]:
        return self.center[1] - 0.5 * self.size[1], self.center[1] + 0.5 * self.size[1]

    def translated(self, dx: float, dy: float) -> "TerrainBox":
        cx, cy, cz = self.center
        return TerrainBox(self.box_id, (cx + dx, cy + dy, cz), self.size)


class SteppableGrid:
    """2.5D grid over the mapped region: per-cell steppable flag, surface
    height, and the id of the plane the cell belongs to (-1 when none)."""

    def __init__(
        self,
        resolution: float,
        x0: float,
        y0: float,
        steppable: np.ndarray,
        height: np.ndarray,
        plane_id: np.ndarray,
    ):
        self.resolution = float(resolution)
        self.x0 = float(x0)
        self.y0 = float(y0)
        self.steppable = np.asarray(steppable, dtype=bool)
        self.height = np.asarray(height, dtype=float)
        self.plane_id = np.asarray(plane_id, dtype=np.int32)
        self.nx, self.ny = self.steppable.shape

    @classmethod
    def empty(cls, resolution: float, x0: float, y0: float, nx: int, ny: int) -> "SteppableGrid":
        return cls(
            resolution,
            x0,
            y0,
            np.zeros((nx, ny), dtype=bool),
            np.full((nx, ny), np.nan),
            np.full((nx, ny), -1, dtype=np.int32),
        )

    @property
    def n_steppable(self) -> int:
        return int(self.steppable.sum())

    def cell_index(self, x: float, y: float) -> tuple[int, int]:
        return (
            int(math.floor((x - self.x0) / self.resolution)),
            int(math.floor((y - self.y0) / self.resolution)),
        )

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        return (
            self.x0 + (ix + 0.5) * self.resolution,
            self.y0 + (iy + 0.5) * self.resolution,
        )

    def in_bounds(self, ix, iy):
        return (ix >= 0) & (ix < self.nx) & (iy >= 0) & (iy < self.ny)

    def steppable_at(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Vectorized steppability lookup; positions off the grid are False."""
        ix, iy = point_cell_indices(self.x0, self.y0, self.resolution, xs, ys)
        ok = self.in_bounds(ix, iy)
        result = np.zeros(ix.shape, dtype=bool)
        result[ok] = self.steppable[ix[ok], iy[ok]]
        return result

    def to_json(self) -> str:
        """Serialize with run-length-encoded cells; heights as integer mm so a
        load/save round trip is bit-exact."""
        flat_s = self.steppable.ravel()
        flat_h = np.where(np.isnan(self.height), 0.0, self.height).ravel()
        flat_mm = np.round(flat_h * 1000.0).astype(np.int64)
        flat_p = self.plane_id.ravel()

        runs = []
        n = flat_s.size
        start = 0
        while start < n:
            s, h, p = bool(flat_s[start]), int(flat_mm[start]), int(flat_p[start])
            end = start + 1
            while end < n and flat_s[end] == s and flat_mm[end] == h and flat_p[end] == p:
                end += 1
            runs.append([end - start, int(s), h, p])
            start = end
        doc = {
            "schema": GRID_SCHEMA_VERSION,
            "resolution": self.resolution,
            "origin": [self.x0, self.y0],
            "nx": self.nx,
            "ny": self.ny,
            "cells": runs,
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "SteppableGrid":
        doc = json.loads(text)
        nx, ny = int(doc["nx"]), int(doc["ny"])
        steppable = np.zeros(nx * ny, dtype=bool)
        height = np.full(nx * ny, np.nan)
        plane_id = np.full(nx * ny, -1, dtype=np.int32)
        pos = 0
        for count, s, h_mm, p in doc["cells"]:
            steppable[pos : pos + count] = bool(s)
            if s:
                height[pos : pos + count] = h_mm / 1000.0
            plane_id[pos : pos + count] = p
            pos += count
        if pos != nx * ny:
            raise ValueError("cell run lengths do not cover the grid")
        return cls(
            doc["resolution"],
            doc["origin"][0],
            doc["origin"][1],
            steppable.reshape(nx, ny),
            height.reshape(nx, ny),
            plane_id.reshape(nx, ny),
        )


def transform_to_base(cloud: PointCloud, sensor_pose: np.ndarray) -> PointCloud:
    """Express a sensor-frame cloud in the base frame via a 4x4 rigid transform."""
    if cloud.frame_tag != FRAME_SENSOR:
        raise ValueError("cloud is not in the sensor frame")
    pose = np.asarray(sensor_pose, dtype=float)
    if pose.shape != (4, 4) or not np.all(np.isfinite(pose)):
        raise InvalidPose("sensor pose must be a finite 4x4 matrix")
    r, t = pose[:3, :3], pose[:3, 3]
    if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
        raise InvalidPose("rotation block is not orthonormal")
    return PointCloud(cloud.points @ r.T + t, FRAME_BASE)


def crop_roi(cloud: PointCloud, roi: RegionOfInterest) -> PointCloud:
    return PointCloud(cloud.points[roi.mask(cloud.points)], cloud.frame_tag)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Keep one centroid per occupied voxel. Empty input passes through."""
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    keys -= keys.min(axis=0)
    dims = keys.max(axis=0) + 1
    flat = (keys[:, 0] * dims[1] + keys[:, 1]) * dims[2] + keys[:, 2]
    _, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
    sums = np.column_stack(
        [
            np.bincount(inverse, weights=cloud.points[:, k], minlength=counts.size)
            for k in range(3)
        ]
    )
    return PointCloud(sums / counts[:, None], cloud.frame_tag)


def crop_and_downsample(cloud: PointCloud, cfg: MappingConfig) -> PointCloud:
    return voxel_downsample(crop_roi(cloud, cfg.roi), cfg.voxel_downsample)


def _fit_plane_lsq(points: np.ndarray) -> tuple[np.ndarray, float]:
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    normal = vt[-1]
    # Canonical orientation: upward-facing normals; walls get a positive
    # leading component so the sign is reproducible.
    if abs(normal[2]) > 1e-9:
        if normal[2] < 0:
            normal = -normal
    elif normal[np.argmax(np.abs(normal))] < 0:
        normal = -normal
    return normal, float(normal @ centroid)


_CONSENSUS_SUBSET = 2048


def _plane_hypotheses(
    work: np.ndarray, n_iter: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Batch of candidate planes: half generic three-point samples, half
    single-point horizontal proposals (terrain surfaces are near-horizontal,
    which makes small planes vastly cheaper to hit)."""
    n = work.shape[0]
    m3 = n_iter // 2
    m1 = n_iter - m3
    tri = rng.integers(0, n, size=(m3, 3))
    p0 = work[tri[:, 0]]
    normals = np.cross(work[tri[:, 1]] - p0, work[tri[:, 2]] - p0)
    lengths = np.linalg.norm(normals, axis=1)
    ok = lengths > 1e-12
    normals = normals[ok] / lengths[ok, None]
    offsets = np.einsum("ij,ij->i", normals, p0[ok])
    flat = work[rng.integers(0, n, size=m1)]
    flat_normals = np.zeros((m1, 3))
    flat_normals[:, 2] = 1.0
    return (
        np.vstack([normals, flat_normals]),
        np.concatenate([offsets, flat[:, 2]]),
    )


def segment_planes(cloud: PointCloud, cfg: MappingConfig) -> list[Plane]:
    """Extract major planes by iterative RANSAC, then drop tilted ones.

    Hypotheses are scored on a fixed-size consensus subsample at half the
    distance threshold: the tight band separates true surfaces from slanted
    planes that would otherwise harvest inliers across several stacked
    surfaces. The winning hypothesis is refined by least squares and its
    full-threshold inliers are removed before the next round. Planes whose
    normals deviate from +z by more than `max_tilt_deg` are discarded from
    the result (walls and clutter).
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot segment an empty cloud")
    rng = np.random.default_rng(cfg.seed)
    points = cloud.points
    active = np.arange(len(cloud))
    tau = cfg.ransac_dist_threshold

    planes: list[Plane] = []
    while len(planes) < cfg.ransac_max_planes and active.size >= cfg.ransac_min_inliers:
        work = points[active]
        n = work.shape[0]
        if n > _CONSENSUS_SUBSET:
            sub = work[rng.choice(n, _CONSENSUS_SUBSET, replace=False)]
        else:
            sub = work
        normals, offsets = _plane_hypotheses(work, cfg.ransac_iterations, rng)
        dists = np.abs(sub @ normals.T - offsets)
        counts = (dists <= 0.5 * tau).sum(axis=0)
        best = int(np.argmax(counts))

        seed_mask = np.abs(work @ normals[best] - offsets[best]) <= 0.5 * tau
        if int(seed_mask.sum()) < 3:
            break
        normal, offset = _fit_plane_lsq(work[seed_mask])
        refined = np.abs(work @ normal - offset) <= tau
        if int(refined.sum()) < cfg.ransac_min_inliers:
            break
        inlier_idx = active[refined]
        planes.append(
            Plane(
                normal=normal,
                offset=offset,
                inliers=inlier_idx,
                mean_height=float(points[inlier_idx, 2].mean()),
            )
        )
        active = active[~refined]

    planes.sort(key=lambda p: len(p.inliers), reverse=True)
    return [p for p in planes if p.tilt_deg() <= cfg.max_tilt_deg]


def build_steppable_grid(
    planes: list[Plane], cloud: PointCloud, cfg: MappingConfig
) -> SteppableGrid:
    """Rasterize accepted planes into the steppable grid.

    Every cloud point is assigned to its nearest accepted plane when within
    the RANSAC distance threshold. A cell is steppable when at least
    `min_points_per_cell` points of exactly one plane land in it; ambiguous
    cells (two planes with enough support) stay blocked. Cell height is the
    winning plane evaluated at the cell center.
    """
    roi = cfg.roi
    res = cfg.resolution
    nx = int(round(roi.length / res))
    ny = int(round(roi.width / res))
    x0 = roi.origin_x
    y0 = roi.origin_y - 0.5 * roi.width
    grid = SteppableGrid.empty(res, x0, y0, nx, ny)
    if not planes or len(cloud) == 0:
        return grid

    pts = cloud.points[roi.mask(cloud.points)]
    if pts.shape[0] == 0:
        return grid

    dists = np.stack([np.abs(pts @ p.normal - p.offset) for p in planes])
    owner = np.argmin(dists, axis=0)
    owned = dists[owner, np.arange(pts.shape[0])] <= cfg.ransac_dist_threshold

    ix, iy = point_cell_indices(x0, y0, res, pts[:, 0], pts[:, 1])
    ok = owned & grid.in_bounds(ix, iy)
    flat = ix[ok] * ny + iy[ok]

    counts = np.zeros((len(planes), nx * ny), dtype=np.int32)
    np.add.at(counts, (owner[ok], flat), 1)

    meets = counts >= cfg.min_points_per_cell
    n_meeting = meets.sum(axis=0)
    winner = np.argmax(counts, axis=0)
    steppable = (n_meeting == 1) & meets[winner, np.arange(nx * ny)]

    steppable = steppable.reshape(nx, ny)
    winner = winner.reshape(nx, ny)
    cx = x0 + (np.arange(nx) + 0.5) * res
    cy = y0 + (np.arange(ny) + 0.5) * res
    cxg, cyg = np.meshgrid(cx, cy, indexing="ij")
    height = np.full((nx, ny), np.nan)
    plane_id = np.full((nx, ny), -1, dtype=np.int32)
    for k, plane in enumerate(planes):
        sel = steppable & (winner == k)
        if np.any(sel):
            height[sel] = plane.height_at(cxg[sel], cyg[sel])
            plane_id[sel] = k
    return SteppableGrid(res, x0, y0, steppable, height, plane_id)


def generate_synthetic_cloud(
    scene: list[TerrainBox], noise_sigma: float, density: float, seed: int
) -> PointCloud:
    """Sample the top faces of terrain boxes with isotropic Gaussian noise.

    The point count per box is round(density * top-face area); output is
    bit-identical for a fixed seed.
    """
    if not scene:
        raise EmptyScene("scene has no terrain boxes")
    if density <= 0:
        raise ValueError("density must be positive")
    rng = np.random.default_rng(seed)
    chunks = []
    for box in scene:
        sx, sy, _ = box.size
        n = int(round(density * sx * sy))
        if n == 0:
            continue
        xy = rng.uniform(-0.5, 0.5, size=(n, 2)) * np.array([sx, sy])
        pts = np.column_stack(
            [xy[:, 0] + box.center[0], xy[:, 1] + box.center[1], np.full(n, box.top_z)]
        )
        if noise_sigma > 0:
            pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
        chunks.append(pts)
    if not chunks:
        raise EmptyScene("terrain boxes have zero sampled area")
    return PointCloud(np.concatenate(chunks), FRAME_BASE)


def uniform_grid(
    length: float = 2.0,
    width: float = 1.0,
    resolution: float = 0.01,
    height: float = 0.0,
    x0: float = 0.0,
    y0: float | None = None,
) -> SteppableGrid:
    """Fully steppable single-plane grid; handy fixture for planner work."""
    nx = int(round(length / resolution))
    ny = int(round(width / resolution))
    if y0 is None:
        y0 = -0.5 * width
    return SteppableGrid(
        resolution,
        x0,
        y0,
        np.ones((nx, ny), dtype=bool),
        np.full((nx, ny), height),
        np.zeros((nx, ny), dtype=np.int32),
    )


def map_cloud(cloud: PointCloud, cfg: MappingConfig) -> SteppableGrid:
    """Full per-frame pipeline: crop, downsample, segment, rasterize.

    Plane fitting runs on the downsampled cloud for speed; the grid is built
    from the cropped full-density cloud so per-cell support counts reflect the
    real measurement density.
    """
    if cloud.frame_tag != FRAME_BASE:
        raise ValueError("mapping expects a base-frame cloud")
    cropped = crop_roi(cloud, cfg.roi)
    if len(cropped) == 0:
        roi = cfg.roi
        return SteppableGrid.empty(
            cfg.resolution,
            roi.origin_x,
            roi.origin_y - 0.5 * roi.width,
            int(round(roi.length / cfg.resolution)),
            int(round(roi.width / cfg.resolution)),
        )
    ds = voxel_downsample(cropped, cfg.voxel_downsample)
    planes = segment_planes(ds, cfg)
    return build_steppable_grid(planes, cropped, cfg)
