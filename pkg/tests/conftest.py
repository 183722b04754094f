import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from bevcontrast.pooling import TaggedPointCloud


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_tagged_cloud(rng: np.random.Generator, n_regions: int = 2, per_region: int = 8,
                      n_less: int = 12, spread: float = 3.0) -> TaggedPointCloud:
    """Hand-built tagged cloud: compact separated clusters plus loose points."""
    chunks, tags = [], []
    for r in range(n_regions):
        center = np.array([spread * (r + 1) * (-1) ** r, spread * (r + 1), 0.8])
        chunks.append(rng.uniform(-0.4, 0.4, size=(per_region, 3)) + center)
        tags.extend([r] * per_region)
    chunks.append(
        rng.uniform(-spread * n_regions, spread * n_regions, size=(n_less, 3))
        * np.array([1.0, 1.0, 0.02])
    )
    tags.extend([-1] * n_less)
    points = np.vstack(chunks)
    tags = np.asarray(tags)
    region_index = {r: np.flatnonzero(tags == r) for r in range(n_regions)}
    return TaggedPointCloud(points, tags, region_index)
