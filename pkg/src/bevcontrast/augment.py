"""Spatial view augmentation of tagged point clouds.

A view transform is flip -> rotate about z -> isotropic scale, applied
in that fixed order. Tags and region membership ride along unchanged,
and point order is preserved: index i of the input corresponds to
index i of the output, which is exactly the cross-view correspondence
the contrastive losses rely on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .pooling import TaggedPointCloud

ROTATION_RANGE_DEG = (-90.0, 90.0)
SCALE_RANGE = (0.9, 1.1)


@dataclass(frozen=True)
class AugmentationSpec:
    """One sampled view transform.

    sample_augmentation draws rotation_deg in [-90, 90] and scale in
    [0.9, 1.1]; specs built by hand (e.g. analytic inverses) may sit
    slightly outside those sampling ranges.
    """

    rotation_deg: float = 0.0
    scale: float = 1.0
    flip_x: bool = False
    flip_y: bool = False


def identity_spec() -> AugmentationSpec:
    return AugmentationSpec()


def sample_augmentation(rng: np.random.Generator) -> AugmentationSpec:
    """Rotation ~ U[-90, 90] deg, scale ~ U[0.9, 1.1], flips ~ Bernoulli(1/2)."""
    return AugmentationSpec(
        rotation_deg=float(rng.uniform(*ROTATION_RANGE_DEG)),
        scale=float(rng.uniform(*SCALE_RANGE)),
        flip_x=bool(rng.random() < 0.5),
        flip_y=bool(rng.random() < 0.5),
    )


def transform_points(points: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    """Apply flip -> rotate(z) -> scale to an (N, 3) array."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3).copy()
    if spec.flip_x:
        pts[:, 0] = -pts[:, 0]
    if spec.flip_y:
        pts[:, 1] = -pts[:, 1]
    theta = math.radians(spec.rotation_deg)
    c, s = math.cos(theta), math.sin(theta)
    x = pts[:, 0] * c - pts[:, 1] * s
    y = pts[:, 0] * s + pts[:, 1] * c
    pts[:, 0] = x
    pts[:, 1] = y
    return pts * spec.scale


def apply_augmentation(tpc: TaggedPointCloud, spec: AugmentationSpec) -> TaggedPointCloud:
    """Transform coordinates; tags and region_index are copied verbatim."""
    return TaggedPointCloud(
        points=transform_points(tpc.points, spec),
        tags=tpc.tags.copy(),
        region_index={r: idx.copy() for r, idx in tpc.region_index.items()},
    )


def invert_augmentation(spec: AugmentationSpec) -> AugmentationSpec:
    """Analytic inverse, again in flip -> rotate -> scale form.

    A single-axis flip anti-commutes with rotations (F R(t) = R(-t) F),
    so the inverse keeps the same flips and negates the angle only when
    zero or both axes are flipped.
    """
    single_flip = spec.flip_x != spec.flip_y
    angle = spec.rotation_deg if single_flip else -spec.rotation_deg
    return replace(spec, rotation_deg=angle, scale=1.0 / spec.scale)
