"""Unsupervised semantic pooling of a point cloud.

Pipeline: fit-and-remove the dominant ground plane, density-cluster the
remaining points, drop clusters that are too large or floating too
high, then tag every point with its surviving region index (or -1).
The result partitions the cloud into semantic-rich regions and a
semantic-less remainder; nothing here ever looks at ground truth.
"""
from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DataWarning


@dataclass
class PoolingConfig:
    dbscan_eps: float = 0.75
    dbscan_min_pts: int = 5
    ground_inlier_threshold: float = 0.15
    ground_ransac_iters: int = 200
    max_cluster_extent_xy: float = 12.0
    max_cluster_base_z: float = 2.0
    max_cluster_points_fraction: float = 0.25

    def validate(self) -> None:
        if self.dbscan_eps <= 0:
            raise ConfigError("dbscan_eps: must be positive")
        if self.dbscan_min_pts < 1:
            raise ConfigError("dbscan_min_pts: must be at least 1")
        if self.ground_inlier_threshold <= 0:
            raise ConfigError("ground_inlier_threshold: must be positive")
        if self.ground_ransac_iters < 1:
            raise ConfigError("ground_ransac_iters: must be at least 1")
        if self.max_cluster_extent_xy <= 0:
            raise ConfigError("max_cluster_extent_xy: must be positive")
        if self.max_cluster_base_z <= 0:
            raise ConfigError("max_cluster_base_z: must be positive")
        if not 0 < self.max_cluster_points_fraction <= 1:
            raise ConfigError("max_cluster_points_fraction: must be in (0, 1]")


@dataclass
class TaggedPointCloud:
    """Points with a per-point region tag: -1 or a dense region index."""

    points: np.ndarray
    tags: np.ndarray
    region_index: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n_regions(self) -> int:
        return len(self.region_index)

    def semantic_less_indices(self) -> np.ndarray:
        return np.flatnonzero(self.tags < 0)


@dataclass
class RegionStats:
    n_regions: int
    points_per_region: list[int]


def remove_ground(points: np.ndarray, config: PoolingConfig, seed: int) -> np.ndarray:
    """Boolean mask of inliers of the dominant RANSAC plane.

    Candidate triples are drawn from a canonical (lexicographically
    sorted) view of the cloud, so the returned mask does not depend on
    input point order. Fewer than 3 points yields an all-false mask and
    a warning.
    """
    config.validate()
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    mask = np.zeros(n, dtype=bool)
    if n < 3:
        warnings.warn("remove_ground: fewer than 3 points, no plane fitted", DataWarning)
        return mask

    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0]))
    canon = points[order]
    rng = np.random.default_rng(seed)
    best_count = 0
    best_inliers: np.ndarray | None = None
    for _ in range(config.ground_ransac_iters):
        tri = rng.choice(n, size=3, replace=False)
        a, b, c = canon[tri]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue  # degenerate (collinear) sample
        normal = normal / norm
        dist = np.abs((canon - a) @ normal)
        inliers = dist <= config.ground_inlier_threshold
        count = int(inliers.sum())
        if count > best_count:  # ties keep the first-found plane
            best_count = count
            best_inliers = inliers
    if best_inliers is None:
        warnings.warn("remove_ground: no valid plane found", DataWarning)
        return mask
    mask[order] = best_inliers
    return mask


def _grid_neighbors(points: np.ndarray, eps: float) -> list[np.ndarray]:
    """Per-point neighbor lists (inclusive of self, dist <= eps) via a
    uniform grid with cell size eps."""
    n = points.shape[0]
    cells = np.floor(points / eps).astype(np.int64)
    buckets: dict[tuple[int, int, int], list[int]] = {}
    for i, key in enumerate(map(tuple, cells)):
        buckets.setdefault(key, []).append(i)
    eps2 = eps * eps
    offsets = [
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
    ]
    neighbors: list[np.ndarray] = []
    for i in range(n):
        cx, cy, cz = cells[i]
        cand: list[int] = []
        for dx, dy, dz in offsets:
            cand.extend(buckets.get((cx + dx, cy + dy, cz + dz), ()))
        cand_arr = np.asarray(cand, dtype=np.intp)
        d2 = ((points[cand_arr] - points[i]) ** 2).sum(axis=1)
        neighbors.append(cand_arr[d2 <= eps2])
    return neighbors


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density-based clustering over Euclidean 3-D distance.

    Core point: at least min_pts neighbors within eps, inclusive of the
    point itself and of the eps boundary. Scan order is ascending point
    index; a border point reachable from two clusters belongs to the
    first cluster that claims it. Cluster ids are dense from 0; noise
    is -1.
    """
    if eps <= 0:
        raise ContractError("dbscan: eps must be positive")
    if min_pts < 1:
        raise ContractError("dbscan: min_pts must be at least 1")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    neighbors = _grid_neighbors(points, eps)
    visited = np.zeros(n, dtype=bool)
    cid = 0
    for i in range(n):
        if visited[i]:
            continue
        visited[i] = True
        if neighbors[i].size < min_pts:
            continue  # noise unless claimed later as a border point
        labels[i] = cid
        queue = deque(neighbors[i])
        while queue:
            q = queue.popleft()
            if visited[q]:
                if labels[q] < 0:
                    labels[q] = cid  # former noise becomes a border point
                continue
            visited[q] = True
            labels[q] = cid
            if neighbors[q].size >= min_pts:
                queue.extend(neighbors[q])
        cid += 1
    return labels


def filter_clusters(points: np.ndarray, labels: np.ndarray, config: PoolingConfig) -> list[int]:
    """Cluster ids that survive the size/height heuristics, ascending.

    A cluster is rejected iff its XY bounding-box diagonal exceeds
    max_cluster_extent_xy, or its lowest point sits above
    max_cluster_base_z, or it holds more than max_cluster_points_fraction
    of the non-ground points. The position in the returned list is the
    densified region id.
    """
    config.validate()
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(labels)
    total = labels.size
    kept: list[int] = []
    for cid in np.unique(labels[labels >= 0]):
        member = points[labels == cid]
        span = member[:, :2].max(axis=0) - member[:, :2].min(axis=0)
        diag = float(np.hypot(span[0], span[1]))
        if diag > config.max_cluster_extent_xy:
            continue
        if float(member[:, 2].min()) > config.max_cluster_base_z:
            continue
        if member.shape[0] > config.max_cluster_points_fraction * total:
            continue
        kept.append(int(cid))
    return kept


def pool_semantics(
    points: np.ndarray,
    config: PoolingConfig,
    seed: int,
) -> tuple[TaggedPointCloud, RegionStats]:
    """Ground removal -> clustering -> filtering -> per-point tagging.

    Ground, noise, and rejected-cluster points are tagged -1. Zero
    surviving regions is a valid outcome (N_R = 0).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        raise ContractError("pool_semantics: empty point cloud")
    ground = remove_ground(points, config, seed)
    rest_idx = np.flatnonzero(~ground)
    tags = np.full(points.shape[0], -1, dtype=np.int64)
    region_index: dict[int, np.ndarray] = {}
    counts: list[int] = []
    if rest_idx.size:
        rest_labels = dbscan(points[rest_idx], config.dbscan_eps, config.dbscan_min_pts)
        for new_id, old_id in enumerate(filter_clusters(points[rest_idx], rest_labels, config)):
            members = rest_idx[rest_labels == old_id]
            tags[members] = new_id
            region_index[new_id] = members
            counts.append(int(members.size))
    tpc = TaggedPointCloud(points, tags, region_index)
    return tpc, RegionStats(len(counts), counts)
