"""Sparse voxelization, BEV squashing, map fusion and bilinear sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import PositionalEncoder, scaled_uniform


class ExtentMismatch(ValueError):
    pass


@dataclass(frozen=True)
class RegionOfInterest:
    mins: tuple
    maxs: tuple
    voxel_size: tuple

    def __post_init__(self):
        mins = tuple(float(v) for v in self.mins)
        maxs = tuple(float(v) for v in self.maxs)
        size = tuple(float(v) for v in self.voxel_size)
        if not all(b > a for a, b in zip(mins, maxs)):
            raise ValueError("roi max must exceed min on every axis")
        if not all(s > 0 for s in size):
            raise ValueError("voxel sizes must be positive")
        object.__setattr__(self, "mins", mins)
        object.__setattr__(self, "maxs", maxs)
        object.__setattr__(self, "voxel_size", size)

    @property
    def grid_shape(self) -> tuple:
        # the small slack absorbs float error in ranges that are exact multiples
        return tuple(int(math.ceil((b - a) / s - 1e-9))
                     for a, b, s in zip(self.mins, self.maxs, self.voxel_size))

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((p >= np.array(self.mins)) & (p < np.array(self.maxs)), axis=1)

    def with_voxel(self, voxel_size) -> "RegionOfInterest":
        return RegionOfInterest(self.mins, self.maxs, voxel_size)


def nuscenes_roi() -> RegionOfInterest:
    """Point range and voxel size used for the urban benchmark (7.5 cm x 7.5 cm x 20 cm)."""
    return RegionOfInterest((-54.0, -54.0, -5.0), (54.0, 54.0, 3.0), (0.075, 0.075, 0.2))


@dataclass
class SparseVoxelGrid:
    """Occupied voxels only, kept as (sum, count) so partial grids merge exactly."""

    roi: RegionOfInterest
    indices: np.ndarray   # (K, 3) int64, lexicographically sorted
    sums: np.ndarray      # (K, D)
    counts: np.ndarray    # (K,) int64

    @property
    def features(self) -> np.ndarray:
        return self.sums / self.counts[:, None]

    @property
    def dim(self) -> int:
        return self.sums.shape[1]

    def __len__(self):
        return len(self.indices)

    def as_dict(self) -> dict:
        return {tuple(int(v) for v in idx): (feat, int(c))
                for idx, feat, c in zip(self.indices, self.features, self.counts)}

    def merge(self, other: "SparseVoxelGrid") -> "SparseVoxelGrid":
        if other.roi != self.roi:
            raise ExtentMismatch("cannot merge grids over different regions")
        return _accumulate(self.roi, np.vstack([self.indices, other.indices]),
                           np.vstack([self.sums, other.sums]),
                           np.concatenate([self.counts, other.counts]))


def _accumulate(roi, indices, sums, counts) -> SparseVoxelGrid:
    dim = sums.shape[1] if sums.ndim == 2 else 0
    if len(indices) == 0:
        return SparseVoxelGrid(roi, np.zeros((0, 3), np.int64), np.zeros((0, dim)), np.zeros(0, np.int64))
    uniq, inverse = np.unique(indices, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    out_sums = np.zeros((len(uniq), dim))
    np.add.at(out_sums, inverse, sums)
    out_counts = np.bincount(inverse, weights=counts, minlength=len(uniq)).astype(np.int64)
    return SparseVoxelGrid(roi, uniq.astype(np.int64), out_sums, out_counts)


def voxelize(points: np.ndarray, features: np.ndarray, roi: RegionOfInterest) -> SparseVoxelGrid:
    """Bin points into occupied voxels; each voxel feature is the member mean."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if len(features) != len(points):
        raise ValueError("one feature row per point is required")
    idx = np.floor((points - np.array(roi.mins)) / np.array(roi.voxel_size)).astype(np.int64)
    # rounding can push a point just below max onto the next index
    idx = np.clip(idx, 0, np.array(roi.grid_shape) - 1)
    keep = roi.contains(points)
    return _accumulate(roi, idx[keep], features[keep], np.ones(int(keep.sum()), np.int64))


@dataclass
class BevFeatureMap:
    """Dense (nx, ny, D) grid; cell (i, j) is centered at ``origin + (i + 0.5, j + 0.5) * cell``."""

    data: np.ndarray
    origin: tuple
    cell: tuple

    @property
    def shape(self) -> tuple:
        return self.data.shape[:2]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def cell_center(self, i, j) -> tuple:
        return (self.origin[0] + (i + 0.5) * self.cell[0], self.origin[1] + (j + 0.5) * self.cell[1])

    def cell_index(self, x, y) -> tuple:
        """Nearest cell, clamped to the map."""
        i = int(np.clip(math.floor((x - self.origin[0]) / self.cell[0]), 0, self.shape[0] - 1))
        j = int(np.clip(math.floor((y - self.origin[1]) / self.cell[1]), 0, self.shape[1] - 1))
        return i, j

    def tokens(self) -> np.ndarray:
        """Flattened (nx * ny, D) feature tokens."""
        return self.data.reshape(-1, self.dim)


def to_bev(grid: SparseVoxelGrid) -> BevFeatureMap:
    """Mean-pool occupied z-levels into a BEV map; empty columns stay zero."""
    nx, ny, _ = grid.roi.grid_shape
    data = np.zeros((nx, ny, grid.dim))
    if len(grid):
        cols = grid.indices[:, 0] * ny + grid.indices[:, 1]
        uniq, inverse = np.unique(cols, return_inverse=True)
        inverse = inverse.reshape(-1)
        sums = np.zeros((len(uniq), grid.dim))
        np.add.at(sums, inverse, grid.features)
        levels = np.bincount(inverse, minlength=len(uniq))
        flat = data.reshape(-1, grid.dim)
        flat[uniq] = sums / levels[:, None]
    origin = (grid.roi.mins[0], grid.roi.mins[1])
    return BevFeatureMap(data, origin, grid.roi.voxel_size[:2])


def fuse_concat(a: BevFeatureMap, b: BevFeatureMap) -> BevFeatureMap:
    if a.shape != b.shape or not np.allclose(a.origin, b.origin, rtol=0, atol=0) \
            or not np.allclose(a.cell, b.cell, rtol=0, atol=0):
        raise ExtentMismatch("maps must share extents and cell sizes")
    return BevFeatureMap(np.concatenate([a.data, b.data], axis=2), a.origin, a.cell)


def bilinear_sample_many(fmap: BevFeatureMap, xy: np.ndarray) -> np.ndarray:
    """Bilinear interpolation between cell centers; outside points clamp to the border."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    nx, ny = fmap.shape
    fx = np.clip((xy[:, 0] - fmap.origin[0]) / fmap.cell[0] - 0.5, 0.0, nx - 1)
    fy = np.clip((xy[:, 1] - fmap.origin[1]) / fmap.cell[1] - 0.5, 0.0, ny - 1)
    i0 = np.minimum(np.floor(fx).astype(np.int64), max(nx - 2, 0))
    j0 = np.minimum(np.floor(fy).astype(np.int64), max(ny - 2, 0))
    i1 = np.minimum(i0 + 1, nx - 1)
    j1 = np.minimum(j0 + 1, ny - 1)
    tx = (fx - i0)[:, None]
    ty = (fy - j0)[:, None]
    d = fmap.data
    return ((1 - tx) * (1 - ty) * d[i0, j0] + tx * (1 - ty) * d[i1, j0]
            + (1 - tx) * ty * d[i0, j1] + tx * ty * d[i1, j1])


def bilinear_sample(fmap: BevFeatureMap, x: float, y: float) -> np.ndarray:
    return bilinear_sample_many(fmap, np.array([[x, y]]))[0]


@dataclass
class PointEncoder:
    """Per-point feature: linear reduction of the input feature plus encoded xyz."""

    reduce: np.ndarray
    pe: PositionalEncoder

    @classmethod
    def build(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "PointEncoder":
        return cls(scaled_uniform(rng, in_dim, out_dim), PositionalEncoder.build(3, out_dim, rng))

    @property
    def out_dim(self):
        return self.reduce.shape[1]

    def __call__(self, points, features) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 1:
            features = features[:, None]
        if len(points) == 0:
            return np.zeros((0, self.out_dim))
        return features @ self.reduce + self.pe(np.asarray(points, dtype=np.float64))


def encode_bev(points, features, roi: RegionOfInterest, encoder: PointEncoder) -> BevFeatureMap:
    """Encode points, voxelize, squash to BEV."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = roi.contains(points)
    points = points[inside]
    feats = np.asarray(features, dtype=np.float64)
    feats = feats[:, None][inside] if feats.ndim == 1 else feats[inside]
    grid = voxelize(points, encoder(points, feats) if len(points) else np.zeros((0, encoder.out_dim)), roi)
    return to_bev(grid)
