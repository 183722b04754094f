"""Synthetic driving-like scenes and point-cloud CSV I/O.

A scene is a flat ground plane, a handful of compact object clusters
sitting just above it, sparse clutter, and optionally one oversized
structure that downstream cluster filtering is expected to reject.
Ground truth (per-point membership) exists only so pooling quality and
the linear probe can be scored; nothing downstream trains on it.

Points are (N, 3) float64 arrays in an ego-centric frame with z up.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PointCloudFormatError, PointCloudParseError

# Objects float this far above z=0 so the ground-plane inlier band
# (default 0.15 m) never swallows their lowest points.
OBJECT_BASE_Z = 0.3
# The oversized structure is a dense vertical wall sampled on a jittered
# grid: grid spacing 0.35 m with 0.1 m jitter keeps every neighbor gap
# well under the 0.75 m clustering radius, so the wall is always one
# connected cluster and the size filter sees a single rejectable blob.
STRUCTURE_SIDE = 15.0
STRUCTURE_HEIGHT = 2.8
STRUCTURE_GRID_STEP = 0.35
STRUCTURE_JITTER = 0.1
CSV_DECIMALS = 6


@dataclass
class SceneSpec:
    """Parameters of the synthetic scene generator."""

    extent_xy: float = 20.0
    n_objects: int = 5
    object_points_range: tuple[int, int] = (30, 60)
    object_size_range: tuple[float, float] = (0.6, 1.6)
    ground_point_density: float = 0.5
    ground_noise_sigma: float = 0.05
    clutter_points: int = 30
    large_structure: bool = False

    def validate(self) -> None:
        if self.extent_xy <= 0:
            raise ConfigError("extent_xy: must be positive")
        if self.n_objects < 0:
            raise ConfigError("n_objects: must be non-negative")
        lo, hi = self.object_points_range
        if lo <= 0 or hi < lo:
            raise ConfigError("object_points_range: need 0 < min <= max")
        slo, shi = self.object_size_range
        if slo <= 0 or shi < slo:
            raise ConfigError("object_size_range: need 0 < min <= max")
        if self.ground_point_density < 0:
            raise ConfigError("ground_point_density: must be non-negative")
        if self.ground_noise_sigma < 0:
            raise ConfigError("ground_noise_sigma: must be non-negative")
        if self.clutter_points < 0:
            raise ConfigError("clutter_points: must be non-negative")


@dataclass
class LabeledScene:
    """Generated points with ground-truth membership.

    membership: -1 for ground/clutter/structure, otherwise the object id.
    """

    points: np.ndarray
    true_membership: np.ndarray
    object_centers: list[tuple[float, float, float]] = field(default_factory=list)


def _place_centers(spec: SceneSpec, rng: np.random.Generator) -> tuple[list, np.ndarray | None]:
    """Draw non-overlapping footprints: optional structure first, then objects.

    The pairwise spacing rule dist > 0.75*(side_i + side_j) + 2*0.75 keeps
    the inter-cluster gap above the default clustering radius even
    corner-to-corner, and implies the documented > 2x-max-object-size
    separation between objects.
    """
    placed: list[tuple[float, float, float]] = []  # (cx, cy, side)
    structure = None
    if spec.large_structure:
        side = min(STRUCTURE_SIDE, 1.5 * spec.extent_xy)
        lim = spec.extent_xy - side / 2 - 0.5
        if lim <= 0:
            raise ConfigError("extent_xy: too small to host the large structure")
        structure = np.array([rng.uniform(-lim, lim), rng.uniform(-lim, lim)])
        placed.append((structure[0], structure[1], side))

    sizes = rng.uniform(*spec.object_size_range, size=spec.n_objects)
    for side in sizes:
        lim = spec.extent_xy - side / 2 - 0.5
        if lim <= 0:
            raise ConfigError("extent_xy: too small for object_size_range")
        for _ in range(5000):
            c = rng.uniform(-lim, lim, size=2)
            ok = all(
                np.hypot(c[0] - px, c[1] - py) > 0.75 * (side + ps) + 1.5
                for px, py, ps in placed
            )
            if ok:
                placed.append((c[0], c[1], side))
                break
        else:
            raise ConfigError(
                "n_objects/extent_xy: cannot place objects with the required spacing"
            )
    objects = placed[1:] if spec.large_structure else placed
    return objects, structure


def generate_scene(spec: SceneSpec, seed: int) -> LabeledScene:
    """Deterministically generate a labeled scene for (spec, seed)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    objects, structure = _place_centers(spec, rng)

    chunks: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    centers: list[tuple[float, float, float]] = []

    # ground: uniform in the square, |z| <= sigma
    n_ground = int(round(spec.ground_point_density * (2 * spec.extent_xy) ** 2))
    if n_ground:
        gx = rng.uniform(-spec.extent_xy, spec.extent_xy, size=(n_ground, 2))
        gz = rng.uniform(-spec.ground_noise_sigma, spec.ground_noise_sigma, size=(n_ground, 1))
        chunks.append(np.hstack([gx, gz]))
        labels.append(np.full(n_ground, -1))

    lo, hi = spec.object_points_range
    for oid, (cx, cy, side) in enumerate(objects):
        n = int(rng.integers(lo, hi + 1))
        xy = rng.uniform(-side / 2, side / 2, size=(n, 2)) + (cx, cy)
        z = rng.uniform(OBJECT_BASE_Z, OBJECT_BASE_Z + side, size=(n, 1))
        chunks.append(np.hstack([xy, z]))
        labels.append(np.full(n, oid))
        centers.append((cx, cy, OBJECT_BASE_Z + side / 2))

    if structure is not None:
        side = min(STRUCTURE_SIDE, 1.5 * spec.extent_xy)
        along = np.arange(-side / 2, side / 2 + 1e-9, STRUCTURE_GRID_STEP)
        height = np.arange(OBJECT_BASE_Z, STRUCTURE_HEIGHT + 1e-9, STRUCTURE_GRID_STEP)
        aa, zz = np.meshgrid(along, height, indexing="ij")
        n = aa.size
        wall = np.column_stack([aa.ravel(), np.zeros(n), zz.ravel()])
        wall += rng.uniform(-STRUCTURE_JITTER, STRUCTURE_JITTER, size=(n, 3))
        angle = rng.uniform(0.0, np.pi)
        c, s = np.cos(angle), np.sin(angle)
        rx = wall[:, 0] * c - wall[:, 1] * s + structure[0]
        ry = wall[:, 0] * s + wall[:, 1] * c + structure[1]
        chunks.append(np.column_stack([rx, ry, wall[:, 2]]))
        labels.append(np.full(n, -1))

    if spec.clutter_points:
        xy = rng.uniform(-spec.extent_xy, spec.extent_xy, size=(spec.clutter_points, 2))
        z = rng.uniform(0.0, 3.0, size=(spec.clutter_points, 1))
        chunks.append(np.hstack([xy, z]))
        labels.append(np.full(spec.clutter_points, -1))

    if chunks:
        points = np.vstack(chunks)
        membership = np.concatenate(labels).astype(np.int64)
    else:
        points = np.zeros((0, 3))
        membership = np.zeros(0, dtype=np.int64)
    return LabeledScene(points, membership, centers)


def save_point_cloud(
    points: np.ndarray,
    tags: np.ndarray | None,
    path: str,
    header: bool = False,
) -> None:
    """Write points (and optional integer tags) as fixed-precision CSV."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if tags is not None:
        tags = np.asarray(tags)
        if tags.shape[0] != points.shape[0]:
            raise ConfigError("tags: length must match points")
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write("x,y,z,tag\n" if tags is not None else "x,y,z\n")
        for i, (x, y, z) in enumerate(points):
            row = f"{x:.{CSV_DECIMALS}f},{y:.{CSV_DECIMALS}f},{z:.{CSV_DECIMALS}f}"
            if tags is not None:
                row += f",{int(tags[i])}"
            fh.write(row + "\n")


def load_point_cloud(path: str) -> tuple[np.ndarray, np.ndarray | None]:
    """Read a 3- or 4-column CSV; the tag column must be all-or-nothing."""
    points: list[tuple[float, float, float]] = []
    tags: list[int] = []
    ncols: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if lineno == 1 and line.lower().replace(" ", "") in ("x,y,z", "x,y,z,tag"):
                continue
            fields = line.split(",")
            if len(fields) not in (3, 4):
                raise PointCloudParseError(f"line {lineno}: expected 3 or 4 fields, got {len(fields)}")
            if ncols is None:
                ncols = len(fields)
            elif len(fields) != ncols:
                raise PointCloudFormatError(
                    f"line {lineno}: file mixes {ncols}- and {len(fields)}-column rows"
                )
            try:
                xyz = (float(fields[0]), float(fields[1]), float(fields[2]))
            except ValueError as exc:
                raise PointCloudParseError(f"line {lineno}: {exc}") from exc
            if ncols == 4:
                try:
                    tags.append(int(fields[3]))
                except ValueError as exc:
                    raise PointCloudParseError(f"line {lineno}: bad tag {fields[3]!r}") from exc
            points.append(xyz)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return pts, (np.asarray(tags, dtype=np.int64) if ncols == 4 else None)
