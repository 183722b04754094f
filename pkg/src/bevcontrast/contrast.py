"""Point sampling, bilinear feature reads, and the stage-1 losses.

Two InfoNCE-style objectives share one core:

  * point-level region contrast: every same-region point of the other
    view is a positive; the per-anchor sum is averaged by its positive
    count, and semantic-less samples enrich the negatives;
  * region-aware point contrast: rows are [point ; region-max-pool]
    concatenations with a single index-matched positive.

Anchors are the semantic-rich rows of view 1; denominators always span
all sampled rows of view 2. The blended objective interpolates the two
losses with a weight alpha and differentiates through both branches.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DataWarning, NoRegionsError, NumericalError
from .nnet import tape as T
from .nnet.layers import (
    FeatureMap,
    GridSpec,
    LidarEncoderParams,
    ProjectorParams,
    collect_grads,
    lidar_forward,
    project,
)
from .nnet.tape import Tape, Tensor
from .pooling import TaggedPointCloud


@dataclass
class ContrastConfig:
    """Loss hyperparameters; desk-scale sample counts default to 64."""

    tau: float = 0.07
    alpha: float = 0.5
    n_rich: int = 64
    n_less: int = 64
    proj_dim: int = 128

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError("tau: must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha: must lie in [0, 1]")
        if self.n_rich < 1 or self.n_less < 1:
            raise ConfigError("n_rich/n_less: must be at least 1")
        if self.proj_dim < 1:
            raise ConfigError("proj_dim: must be at least 1")


@dataclass
class SampledSet:
    """Sampled point indices with their coordinates under both views.

    Row i of view 1 corresponds to row i of view 2. The first n_rich
    rows carry region ids >= 0; the last n_less rows carry -1.
    """

    indices: np.ndarray
    region_of: np.ndarray
    coords_view1: np.ndarray
    coords_view2: np.ndarray
    n_rich: int
    n_less: int

    @property
    def total(self) -> int:
        return self.n_rich + self.n_less


@dataclass
class EmbeddingBatch:
    """(N+M) x D projected features with unit-norm rows."""

    rows: Tensor
    provenance: str = ""

    def __post_init__(self):
        norms = np.linalg.norm(self.rows.value, axis=1)
        if norms.size and np.abs(norms - 1.0).max() > 1e-9:
            raise ContractError(
                f"EmbeddingBatch({self.provenance}): rows are not unit-normalized"
            )


@dataclass
class LossResult:
    value: float
    gradients: dict[str, np.ndarray]
    aux: dict[str, float] = field(default_factory=dict)


@dataclass
class PrcModel:
    """Everything the blended objective needs: encoder, two projectors, grid."""

    lidar: LidarEncoderParams
    proj_plrc: ProjectorParams
    proj_rapc: ProjectorParams
    grid: GridSpec


def sample_points(
    tpc: TaggedPointCloud,
    view1: TaggedPointCloud,
    view2: TaggedPointCloud,
    cfg: ContrastConfig,
    rng: np.random.Generator,
) -> SampledSet:
    """Draw n_rich region-covering samples plus n_less semantic-less ones.

    Rich sampling is round-robin over regions (region k serves draws
    k, k+N_R, ...), uniform within a region, falling back to sampling
    with replacement only when a pool is smaller than its quota. Raises
    NoRegionsError when the cloud has no regions; degrades to M=0 with
    a warning when it has no semantic-less points.
    """
    cfg.validate()
    if tpc.n_regions == 0:
        raise NoRegionsError("sample_points: cloud has no semantic-rich regions")
    if not (len(view1.points) == len(view2.points) == len(tpc.points)):
        raise ContractError("sample_points: views must be index-aligned with the cloud")

    region_ids = sorted(tpc.region_index)
    n_r = len(region_ids)
    n = cfg.n_rich
    quotas = [len(range(k, n, n_r)) for k in range(n_r)]
    drawn: list[np.ndarray] = []
    for rid, quota in zip(region_ids, quotas):
        pool = tpc.region_index[rid]
        if quota <= pool.size:
            picks = rng.choice(pool, size=quota, replace=False)
        else:
            warnings.warn(
                f"sample_points: region {rid} has {pool.size} points for quota {quota}; "
                "sampling with replacement",
                DataWarning,
            )
            picks = rng.choice(pool, size=quota, replace=True)
        drawn.append(picks)
    cursors = [0] * n_r
    rich = np.empty(n, dtype=np.intp)
    for k in range(n):
        r = k % n_r
        rich[k] = drawn[r][cursors[r]]
        cursors[r] += 1

    less_pool = tpc.semantic_less_indices()
    m = cfg.n_less
    if less_pool.size == 0:
        warnings.warn("sample_points: no semantic-less points; degrading to M=0", DataWarning)
        less = np.empty(0, dtype=np.intp)
        m = 0
    elif m <= less_pool.size:
        less = rng.choice(less_pool, size=m, replace=False)
    else:
        warnings.warn(
            f"sample_points: only {less_pool.size} semantic-less points for M={m}; "
            "sampling with replacement",
            DataWarning,
        )
        less = rng.choice(less_pool, size=m, replace=True)

    indices = np.concatenate([rich, less])
    return SampledSet(
        indices=indices,
        region_of=tpc.tags[indices].copy(),
        coords_view1=view1.points[indices, :2].copy(),
        coords_view2=view2.points[indices, :2].copy(),
        n_rich=n,
        n_less=m,
    )


def _frac_coords_flagged(grid: GridSpec, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    v, u, outside = grid.frac_coords(xy)
    if outside.any():
        warnings.warn(
            f"bilinear query: {int(outside.sum())} point(s) outside grid extent, clamped",
            DataWarning,
        )
    return v, u


def bilinear_batch(fm: FeatureMap, xy: np.ndarray, tape: Tape) -> Tensor:
    """(Q, C) bilinear reads of the feature map at metric coordinates."""
    if fm.values.tape is not None and fm.values.tape is not tape:
        raise ContractError("bilinear interpolation: feature map lives on another tape")
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    v, u = _frac_coords_flagged(fm.grid, xy)
    return T.bilinear_gather(fm.values, v, u)


def bilinear_interpolate(fm: FeatureMap, xy, tape: Tape) -> Tensor:
    """Single-query bilinear read returning a (C,) tensor."""
    out = bilinear_batch(fm, np.asarray(xy, dtype=np.float64).reshape(1, 2), tape)
    return T.reshape(out, (fm.grid.c,))


def _rows_of(batch) -> Tensor:
    return batch.rows if isinstance(batch, EmbeddingBatch) else batch


def plrc_weights(region_of: np.ndarray, n_rich: int, n_total: int) -> np.ndarray:
    """Positive-pair weights: 1/(N * C_i) at (i, j) for same-region rich pairs."""
    rich = region_of[:n_rich]
    same = rich[:, None] == rich[None, :]
    counts = same.sum(axis=1)  # includes j == i
    w = np.zeros((n_rich, n_total))
    w[:, :n_rich] = same / (n_rich * counts[:, None])
    return w


def rapc_weights(n_rich: int, n_total: int) -> np.ndarray:
    """Single index-matched positive per anchor, weight 1/N."""
    w = np.zeros((n_rich, n_total))
    w[np.arange(n_rich), np.arange(n_rich)] = 1.0 / n_rich
    return w


def weighted_infonce(anchors: Tensor, keys: Tensor, weights: np.ndarray, tau: float) -> Tensor:
    """sum_ij W_ij * (logsumexp_k(a_i.k_k/tau) - a_i.k_j/tau).

    The weight matrix is a constant; each anchor's weights sum to its
    total coefficient mass in the loss.
    """
    logits = T.mul(T.matmul(anchors, T.transpose(keys)), 1.0 / tau)
    lse = T.logsumexp_rows(logits)
    row_mass = weights.sum(axis=1, keepdims=True)
    return T.sub(T.tsum(T.mul(lse, row_mass)), T.tsum(T.mul(logits, weights)))


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise NumericalError(f"{what}: loss is not finite")


def plrc_loss(
    z1,
    z2,
    sample: SampledSet,
    tau: float,
    tape: Tape,
    symmetric: bool = False,
) -> LossResult:
    """Point-level region contrast with semantic-less negatives.

    Anchors are the n_rich rows of view 1; every same-region rich row of
    view 2 is a positive, averaged per anchor by its positive count.
    The symmetric flag adds the mirrored direction and halves the sum.
    """
    r1, r2 = _rows_of(z1), _rows_of(z2)
    w = plrc_weights(sample.region_of, sample.n_rich, sample.total)
    anchors1 = T.gather_rows(r1, np.arange(sample.n_rich))
    loss = weighted_infonce(anchors1, r2, w, tau)
    if symmetric:
        anchors2 = T.gather_rows(r2, np.arange(sample.n_rich))
        loss = T.mul(T.add(loss, weighted_infonce(anchors2, r1, w, tau)), 0.5)
    _check_finite(float(loss.value), "plrc_loss")
    tape.backward(loss)
    grads = {
        "z1": r1.grad if r1.grad is not None else np.zeros_like(r1.value),
        "z2": r2.grad if r2.grad is not None else np.zeros_like(r2.value),
    }
    return LossResult(float(loss.value), grads)


def region_maxpool(p, sample: SampledSet) -> tuple[Tensor, list[int]]:
    """Channel-wise max over each region's sampled rich rows.

    Returns the (R, D) pooled tensor plus the list of region ids in row
    order. Gradient routes to the arg-max row per channel, ties to the
    lowest row index.
    """
    rows = _rows_of(p)
    rich = sample.region_of[: sample.n_rich]
    present = sorted(set(int(r) for r in rich))
    groups = [np.flatnonzero(rich == rid) for rid in present]
    return T.rowgroup_max(rows, groups), present


def rapc_rows(p, sample: SampledSet, renormalize: bool = True) -> Tensor:
    """Concatenate each row with its region's max-pooled feature.

    Semantic-less rows take a zero block as their region part; rows are
    re-normalized to unit length afterwards (flag-controlled).
    """
    rows = _rows_of(p)
    pooled, present = region_maxpool(rows, sample)
    slot = {rid: k for k, rid in enumerate(present)}
    zero_slot = len(present)
    idx = np.array(
        [slot.get(int(r), zero_slot) for r in sample.region_of], dtype=np.intp
    )
    padded = T.concat([pooled, np.zeros((1, rows.value.shape[1]))], axis=0)
    region_part = T.gather_rows(padded, idx)
    out = T.concat([rows, region_part], axis=1)
    return T.l2_normalize_rows(out) if renormalize else out


def rapc_loss(p1, p2, sample: SampledSet, tau: float, tape: Tape) -> LossResult:
    """Region-aware point contrast over concatenated rows.

    The single positive for anchor i is the index-matched row of the
    other view; negatives span all n_rich + n_less rows.
    """
    r1, r2 = _rows_of(p1), _rows_of(p2)
    w = rapc_weights(sample.n_rich, sample.total)
    anchors = T.gather_rows(r1, np.arange(sample.n_rich))
    loss = weighted_infonce(anchors, r2, w, tau)
    _check_finite(float(loss.value), "rapc_loss")
    tape.backward(loss)
    grads = {
        "p1": r1.grad if r1.grad is not None else np.zeros_like(r1.value),
        "p2": r2.grad if r2.grad is not None else np.zeros_like(r2.value),
    }
    return LossResult(float(loss.value), grads)


def _branch_similarities(z1: np.ndarray, z2: np.ndarray, sample: SampledSet) -> tuple[float, float]:
    """Mean index-matched similarity and mean cross-region similarity."""
    n = sample.n_rich
    sims = z1[:n] @ z2.T
    pos = float(np.mean(sims[np.arange(n), np.arange(n)]))
    diff = sample.region_of[:n, None] != sample.region_of[None, :]
    neg = float(sims[diff].mean()) if diff.any() else 0.0
    return pos, neg


def prc_objective(
    view1: TaggedPointCloud,
    view2: TaggedPointCloud,
    sample: SampledSet,
    model: PrcModel,
    cfg: ContrastConfig,
    tape: Tape,
    leaves: dict[str, Tensor],
) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
    """Build the blended graph; returns (total, plrc, rapc, z1, z2) tensors.

    Both branches read the same two LiDAR feature maps through their
    own projectors; parameters land in `leaves` under the prefixes
    lidar.*, proj_plrc.*, proj_rapc.*.
    """
    fm1 = lidar_forward(view1.points, model.lidar, model.grid, tape, leaves, "lidar")
    fm2 = lidar_forward(view2.points, model.lidar, model.grid, tape, leaves, "lidar")
    feat1 = bilinear_batch(fm1, sample.coords_view1, tape)
    feat2 = bilinear_batch(fm2, sample.coords_view2, tape)
    z1 = project(feat1, model.proj_plrc, "train", tape, leaves, "proj_plrc")
    z2 = project(feat2, model.proj_plrc, "train", tape, leaves, "proj_plrc")
    p1 = project(feat1, model.proj_rapc, "train", tape, leaves, "proj_rapc")
    p2 = project(feat2, model.proj_rapc, "train", tape, leaves, "proj_rapc")

    w_plrc = plrc_weights(sample.region_of, sample.n_rich, sample.total)
    plrc = weighted_infonce(T.gather_rows(z1, np.arange(sample.n_rich)), z2, w_plrc, cfg.tau)

    q1 = rapc_rows(p1, sample)
    q2 = rapc_rows(p2, sample)
    w_rapc = rapc_weights(sample.n_rich, sample.total)
    rapc = weighted_infonce(T.gather_rows(q1, np.arange(sample.n_rich)), q2, w_rapc, cfg.tau)

    total = T.add(T.mul(plrc, cfg.alpha), T.mul(rapc, 1.0 - cfg.alpha))
    return total, plrc, rapc, z1, z2


def prc_loss(
    view1: TaggedPointCloud,
    view2: TaggedPointCloud,
    sample: SampledSet,
    model: PrcModel,
    cfg: ContrastConfig,
    tape: Tape,
    leaves: dict[str, Tensor] | None = None,
) -> LossResult:
    """Blend alpha * L_point-region + (1 - alpha) * L_region-aware.

    One backward pass returns gradients for every encoder and projector
    parameter; branch values and similarity diagnostics land in aux.
    """
    cfg.validate()
    if leaves is None:
        leaves = {}
    total, plrc, rapc, z1, z2 = prc_objective(view1, view2, sample, model, cfg, tape, leaves)
    _check_finite(float(total.value), "prc_loss")
    tape.backward(total)

    pos, neg = _branch_similarities(z1.value, z2.value, sample)
    return LossResult(
        float(total.value),
        collect_grads(leaves),
        aux={
            "loss_plrc": float(plrc.value),
            "loss_rapc": float(rapc.value),
            "pos_sim_mean": pos,
            "neg_sim_mean": neg,
        },
    )
