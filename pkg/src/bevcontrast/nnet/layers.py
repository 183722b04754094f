"""Toy BEV encoders and MLP projectors built on the tape engine.

The LiDAR encoder is a pillar-style stack: per-point MLP, channel-wise
max over each grid cell, scatter to an H x W x C map, one 3x3
convolution. The camera encoder consumes a noisy occupancy raster
through two conv+ReLU stages. Projectors are two linear layers with
batch normalization and ReLU after the first, and L2-normalized output
rows.

Everything is float64 and every intermediate is taped so gradients can
be checked against finite differences.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from ..errors import ConfigError, ContractError, DataWarning
from . import tape as T
from .tape import Tape, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # retention factor: running = m*running + (1-m)*batch


@dataclass(frozen=True)
class GridSpec:
    """Square BEV grid with metric extent (half-width) and C channels."""

    extent_xy: float
    h: int
    w: int
    c: int

    def __post_init__(self):
        if self.extent_xy <= 0:
            raise ConfigError("extent_xy: must be positive")
        if self.h != self.w:
            raise ConfigError("h/w: square grids only (h == w)")
        if self.h < 2:
            raise ConfigError("h: grid must be at least 2x2")
        if self.c < 1:
            raise ConfigError("c: at least one channel required")

    @property
    def cell_size(self) -> float:
        return 2.0 * self.extent_xy / self.h

    def cell_of(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Map (Q, 2) metric coords to (rows, cols, in_extent mask).

        Rows index y, columns index x. Points exactly on the +extent
        border fall in the last cell.
        """
        x, y = xy[:, 0], xy[:, 1]
        e = self.extent_xy
        inside = (np.abs(x) <= e) & (np.abs(y) <= e)
        cols = np.clip(((x + e) / self.cell_size).astype(np.intp), 0, self.w - 1)
        rows = np.clip(((y + e) / self.cell_size).astype(np.intp), 0, self.h - 1)
        return rows, cols, inside

    def frac_coords(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Fractional (v, u) grid coords in cell-center units, plus an
        outside-extent mask (callers decide whether clamping is notable)."""
        x, y = xy[:, 0], xy[:, 1]
        e = self.extent_xy
        outside = (np.abs(x) > e) | (np.abs(y) > e)
        u = (x + e) / self.cell_size - 0.5
        v = (y + e) / self.cell_size - 0.5
        return v, u, outside


@dataclass
class FeatureMap:
    """H x W x C BEV feature grid; values may be taped during training."""

    grid: GridSpec
    values: Tensor


@dataclass
class LidarEncoderParams:
    """Point MLP (3 -> hidden -> C) plus one post-scatter 3x3 conv."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    conv_k: np.ndarray
    conv_b: np.ndarray

    def trainable_dict(self) -> dict[str, np.ndarray]:
        return {
            "w1": self.w1,
            "b1": self.b1,
            "w2": self.w2,
            "b2": self.b2,
            "conv_k": self.conv_k,
            "conv_b": self.conv_b,
        }

    def as_dict(self) -> dict[str, np.ndarray]:
        return self.trainable_dict()

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray]) -> "LidarEncoderParams":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


@dataclass
class CameraEncoderParams:
    """Two stacked 3x3 conv + ReLU stages: 1 -> C -> C channels."""

    conv1_k: np.ndarray
    conv1_b: np.ndarray
    conv2_k: np.ndarray
    conv2_b: np.ndarray

    def trainable_dict(self) -> dict[str, np.ndarray]:
        return {
            "conv1_k": self.conv1_k,
            "conv1_b": self.conv1_b,
            "conv2_k": self.conv2_k,
            "conv2_b": self.conv2_b,
        }

    def as_dict(self) -> dict[str, np.ndarray]:
        return self.trainable_dict()

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray]) -> "CameraEncoderParams":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


@dataclass
class ProjectorParams:
    """Two linear layers; batch norm and ReLU only after the first.

    Running statistics are state, not trainable parameters: they are
    checkpointed but never touched by the optimizer.
    """

    w1: np.ndarray
    b1: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    running_mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    running_var: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        mid = self.b1.shape[0]
        if self.running_mean is None:
            self.running_mean = np.zeros(mid)
        if self.running_var is None:
            self.running_var = np.ones(mid)

    def trainable_dict(self) -> dict[str, np.ndarray]:
        return {
            "w1": self.w1,
            "b1": self.b1,
            "gamma": self.gamma,
            "beta": self.beta,
            "w2": self.w2,
            "b2": self.b2,
        }

    def as_dict(self) -> dict[str, np.ndarray]:
        d = self.trainable_dict()
        d["running_mean"] = self.running_mean
        d["running_var"] = self.running_var
        return d

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray]) -> "ProjectorParams":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})

    def update_running(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        self.running_mean = BN_MOMENTUM * self.running_mean + (1 - BN_MOMENTUM) * batch_mean
        self.running_var = BN_MOMENTUM * self.running_var + (1 - BN_MOMENTUM) * batch_var


def init_lidar_params(
    c: int, hidden: int, rng: np.random.Generator, scale: float = 1.0
) -> LidarEncoderParams:
    return LidarEncoderParams(
        w1=rng.standard_normal((3, hidden)) * (scale * np.sqrt(2.0 / 3)),
        b1=np.zeros(hidden),
        w2=rng.standard_normal((hidden, c)) * (scale * np.sqrt(2.0 / hidden)),
        b2=np.zeros(c),
        conv_k=rng.standard_normal((3, 3, c, c)) * (scale * np.sqrt(2.0 / (9 * c))),
        conv_b=np.zeros(c),
    )


def init_camera_params(c: int, rng: np.random.Generator, scale: float = 1.0) -> CameraEncoderParams:
    return CameraEncoderParams(
        conv1_k=rng.standard_normal((3, 3, 1, c)) * (scale * np.sqrt(2.0 / 9)),
        conv1_b=np.zeros(c),
        conv2_k=rng.standard_normal((3, 3, c, c)) * (scale * np.sqrt(2.0 / (9 * c))),
        conv2_b=np.zeros(c),
    )


def init_projector_params(
    c_in: int, mid: int, out: int, rng: np.random.Generator, scale: float = 1.0
) -> ProjectorParams:
    # small random output bias keeps rows away from the origin even when
    # a whole hidden layer happens to be ReLU-dead for some input row,
    # which would make the output row normalization ill-conditioned
    return ProjectorParams(
        w1=rng.standard_normal((c_in, mid)) * (scale * np.sqrt(2.0 / c_in)),
        b1=np.zeros(mid),
        gamma=np.ones(mid),
        beta=np.zeros(mid),
        w2=rng.standard_normal((mid, out)) * (scale * np.sqrt(2.0 / mid)),
        b2=rng.standard_normal(out) * 0.1,
    )


def wrap_params(params, tape: Tape, prefix: str, leaves: dict[str, Tensor]) -> SimpleNamespace:
    """Wrap trainable arrays as tape leaves, reusing existing leaves.

    Reuse is what ties shared parameters (e.g. one encoder applied to
    two augmented views) to a single gradient accumulator.
    """
    ns = {}
    for k, arr in params.trainable_dict().items():
        key = f"{prefix}.{k}"
        t = leaves.get(key)
        if t is None:
            t = tape.leaf(arr, name=key)
            leaves[key] = t
        ns[k] = t
    return SimpleNamespace(**ns)


def collect_grads(leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Read accumulated gradients; untouched leaves yield exact zeros."""
    return {
        k: (t.grad if t.grad is not None else np.zeros_like(t.value))
        for k, t in leaves.items()
    }


def lidar_forward(
    points: np.ndarray,
    params: LidarEncoderParams,
    grid: GridSpec,
    tape: Tape,
    leaves: dict[str, Tensor] | None = None,
    prefix: str = "lidar",
) -> FeatureMap:
    """Pillar-style encoder: point MLP -> per-cell max -> scatter -> conv.

    Points outside +/- extent_xy are dropped. With zero surviving points
    the map is all-zero (no conv pass) and a DataWarning is emitted.
    """
    if leaves is None:
        leaves = {}
    p = wrap_params(params, tape, prefix, leaves)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rows, cols, inside = grid.cell_of(points[:, :2])
    kept = points[inside]
    if kept.shape[0] == 0:
        warnings.warn("lidar_forward: no points inside grid extent", DataWarning)
        return FeatureMap(grid, tape.leaf(np.zeros((grid.h, grid.w, grid.c))))
    cells = rows[inside] * grid.w + cols[inside]
    hfeat = T.relu(T.add(T.matmul(Tensor(kept), p.w1), p.b1))
    pfeat = T.add(T.matmul(hfeat, p.w2), p.b2)
    scattered = T.pillar_scatter_max(pfeat, cells, grid.h * grid.w)
    pillar_map = T.reshape(scattered, (grid.h, grid.w, grid.c))
    return FeatureMap(grid, T.conv3x3(pillar_map, p.conv_k, p.conv_b))


def lidar_pillar_map(points: np.ndarray, params: LidarEncoderParams, grid: GridSpec) -> np.ndarray:
    """Pre-convolution scattered map, for tests of the pillar pooling step."""
    tape = Tape()
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rows, cols, inside = grid.cell_of(points[:, :2])
    kept = points[inside]
    if kept.shape[0] == 0:
        return np.zeros((grid.h, grid.w, grid.c))
    cells = rows[inside] * grid.w + cols[inside]
    p = wrap_params(params, tape, "lidar", {})
    hfeat = T.relu(T.add(T.matmul(Tensor(kept), p.w1), p.b1))
    pfeat = T.add(T.matmul(hfeat, p.w2), p.b2)
    scattered = T.pillar_scatter_max(pfeat, cells, grid.h * grid.w)
    return scattered.value.reshape(grid.h, grid.w, grid.c)


def camera_forward(
    raster: np.ndarray,
    params: CameraEncoderParams,
    grid: GridSpec,
    tape: Tape,
    leaves: dict[str, Tensor] | None = None,
    prefix: str = "camera",
) -> FeatureMap:
    """Two conv3x3 + ReLU stages over a single-channel occupancy raster."""
    raster = np.asarray(raster, dtype=np.float64)
    if raster.shape != (grid.h, grid.w):
        raise ContractError(
            f"camera_forward: raster shape {raster.shape} does not match grid {(grid.h, grid.w)}"
        )
    if leaves is None:
        leaves = {}
    p = wrap_params(params, tape, prefix, leaves)
    x = Tensor(raster[:, :, None])
    s1 = T.relu(T.conv3x3(x, p.conv1_k, p.conv1_b))
    s2 = T.relu(T.conv3x3(s1, p.conv2_k, p.conv2_b))
    return FeatureMap(grid, s2)


def occupancy_raster(
    points: np.ndarray,
    grid: GridSpec,
    rng: np.random.Generator,
    flip_prob: float = 0.05,
    dropout_prob: float = 0.1,
) -> np.ndarray:
    """Noisy BEV occupancy image: 1 where any point lands, then cell
    flips with flip_prob and dropout with dropout_prob."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    occ = np.zeros((grid.h, grid.w))
    rows, cols, inside = grid.cell_of(points[:, :2])
    occ[rows[inside], cols[inside]] = 1.0
    flip = rng.random((grid.h, grid.w)) < flip_prob
    occ = np.where(flip, 1.0 - occ, occ)
    drop = rng.random((grid.h, grid.w)) < dropout_prob
    occ = np.where(drop, 0.0, occ)
    return occ


def project(
    batch,
    params: ProjectorParams,
    mode: str,
    tape: Tape,
    leaves: dict[str, Tensor] | None = None,
    prefix: str = "proj",
    normalize: bool = True,
) -> Tensor:
    """Linear -> batch norm -> ReLU -> linear, rows L2-normalized.

    Train mode normalizes with batch statistics over the row dimension
    and folds them into the running statistics; eval mode uses the
    stored running statistics.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"project: unknown mode {mode!r}")
    if leaves is None:
        leaves = {}
    p = wrap_params(params, tape, prefix, leaves)
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float64))
    if x.ndim != 2:
        raise ContractError("project: batch must be 2-D")
    b = x.shape[0]
    if mode == "train" and b < 2:
        raise ContractError("project: train mode needs a batch of at least 2 rows")
    h = T.add(T.matmul(x, p.w1), p.b1)
    if mode == "train":
        mean = T.mul(T.tsum(h, axis=0, keepdims=True), 1.0 / b)
        centered = T.sub(h, mean)
        var = T.mul(T.tsum(T.mul(centered, centered), axis=0, keepdims=True), 1.0 / b)
        params.update_running(mean.value[0], var.value[0])
        xhat = T.div(centered, T.sqrt(T.add(var, BN_EPS)))
    else:
        scale = 1.0 / np.sqrt(params.running_var + BN_EPS)
        xhat = T.mul(T.sub(h, params.running_mean[None, :]), scale[None, :])
    act = T.relu(T.add(T.mul(xhat, p.gamma), p.beta))
    out = T.add(T.matmul(act, p.w2), p.b2)
    if normalize:
        out = T.l2_normalize_rows(out)
    return out


def encode_lidar_values(points: np.ndarray, params: LidarEncoderParams, grid: GridSpec) -> np.ndarray:
    """Untracked encoder evaluation, for frozen-feature consumers."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DataWarning)
        fm = lidar_forward(points, params, grid, Tape())
    return fm.values.value
