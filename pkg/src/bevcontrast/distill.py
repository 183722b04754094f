"""Region-aware contrastive distillation from LiDAR to camera features.

Stage 2 freezes the pretrained LiDAR branch: interpolated LiDAR rows
are unit-normalized targets detached from the graph, and the camera
branch (two-conv encoder plus its projector) is trained to match them
with an InfoNCE objective whose weights give every region the same
total mass 1/N_R regardless of how many points it contributed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NoRegionsError, NumericalError
from .contrast import LossResult, bilinear_batch, weighted_infonce
from .nnet import tape as T
from .nnet.layers import (
    CameraEncoderParams,
    GridSpec,
    LidarEncoderParams,
    ProjectorParams,
    camera_forward,
    collect_grads,
    lidar_forward,
    project,
)
from .nnet.tape import Tape, Tensor
from .pooling import TaggedPointCloud


@dataclass
class RadConfig:
    tau: float = 0.07
    sample_per_region: int = 16
    lidar_frozen: bool = True
    # "raw": targets are unit-normalized interpolations of the LiDAR map
    # (the camera projector maps into the LiDAR channel count);
    # "projected": targets pass through the frozen stage-1 point
    # projector instead, so both sides live in the projector space.
    target: str = "raw"
    within_region: bool = False

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError("tau: must be positive")
        if self.sample_per_region < 1:
            raise ConfigError("sample_per_region: must be at least 1")
        if self.target not in ("raw", "projected"):
            raise ConfigError("target: must be 'raw' or 'projected'")


@dataclass
class Stage2Model:
    camera: CameraEncoderParams
    proj_rad: ProjectorParams
    grid: GridSpec


@dataclass
class DistillBatch:
    """Aligned camera/LiDAR rows; the LiDAR side carries no graph linkage."""

    camera_rows: Tensor
    lidar_rows: np.ndarray
    region_of: np.ndarray
    region_counts: np.ndarray

    def __post_init__(self):
        if self.camera_rows.value.shape != self.lidar_rows.shape:
            raise ContractError("DistillBatch: camera and lidar row shapes differ")


def rad_weights(region_of: np.ndarray, k_total: int) -> np.ndarray:
    """Diagonal weights 1/(N_R * N_S(region of i))."""
    ids, counts = np.unique(region_of, return_counts=True)
    per_region = dict(zip(ids.tolist(), counts.tolist()))
    n_r = len(ids)
    w = np.zeros((k_total, k_total))
    for i, rid in enumerate(region_of):
        w[i, i] = 1.0 / (n_r * per_region[int(rid)])
    return w


def build_distill_batch(
    tpc: TaggedPointCloud,
    lidar_params: LidarEncoderParams,
    model: Stage2Model,
    cfg: RadConfig,
    rng: np.random.Generator,
    tape: Tape,
    raster: np.ndarray,
    leaves: dict[str, Tensor] | None = None,
    frozen_projector: ProjectorParams | None = None,
) -> DistillBatch:
    """Sample pooled points and produce aligned camera/LiDAR rows.

    Up to sample_per_region points per region (all of them when the
    region is smaller), un-augmented coordinates on both sides. The
    LiDAR forward runs on this tape and is detached after interpolation,
    so its parameters provably receive exactly zero gradient.
    """
    cfg.validate()
    if tpc.n_regions == 0:
        raise NoRegionsError("build_distill_batch: cloud has no regions")
    if leaves is None:
        leaves = {}

    picked: list[np.ndarray] = []
    region_of: list[int] = []
    for rid in sorted(tpc.region_index):
        pool = tpc.region_index[rid]
        take = min(cfg.sample_per_region, pool.size)
        picks = rng.choice(pool, size=take, replace=False)
        picked.append(picks)
        region_of.extend([rid] * take)
    indices = np.concatenate(picked)
    coords = tpc.points[indices, :2]

    lidar_leaves: dict[str, Tensor] = {}
    fm_l = lidar_forward(tpc.points, lidar_params, model.grid, tape, lidar_leaves, "lidar")
    l_rows = bilinear_batch(fm_l, coords, tape)
    if cfg.target == "projected":
        if frozen_projector is None:
            raise ContractError("build_distill_batch: projected target needs the stage-1 projector")
        l_rows = project(l_rows, frozen_projector, "eval", tape, lidar_leaves, "frozen_proj")
    else:
        l_rows = T.l2_normalize_rows(l_rows)
    lidar_targets = l_rows.value.copy()  # detached: constants from here on

    fm_c = camera_forward(raster, model.camera, model.grid, tape, leaves, "camera")
    c_feat = bilinear_batch(fm_c, coords, tape)
    c_rows = project(c_feat, model.proj_rad, "train", tape, leaves, "proj_rad")

    counts = np.array([p.size for p in picked])
    return DistillBatch(c_rows, lidar_targets, np.asarray(region_of), counts)


def rad_objective(batch: DistillBatch, tau: float, within_region: bool = False) -> Tensor:
    """Build the distillation loss tensor (LiDAR side stays constant)."""
    k = batch.lidar_rows.shape[0]
    w = rad_weights(batch.region_of, k)
    anchors = batch.camera_rows
    if not within_region:
        return weighted_infonce(anchors, Tensor(batch.lidar_rows), w, tau)
    same = batch.region_of[:, None] == batch.region_of[None, :]
    logits = T.mul(T.matmul(anchors, Tensor(batch.lidar_rows.T)), 1.0 / tau)
    logits = T.add(logits, np.where(same, 0.0, -1e30))
    lse = T.logsumexp_rows(logits)
    return T.sub(T.tsum(T.mul(lse, w.sum(axis=1, keepdims=True))), T.tsum(T.mul(logits, w)))


def rad_loss(
    batch: DistillBatch,
    tau: float,
    tape: Tape,
    within_region: bool = False,
) -> LossResult:
    """Region-weighted InfoNCE between camera rows and detached LiDAR rows.

    Each region contributes total coefficient mass 1/N_R, split evenly
    over its sampled points. The denominator spans every sampled row;
    the within_region flag restricts it to same-region rows instead.
    """
    loss = rad_objective(batch, tau, within_region)
    if not np.isfinite(float(loss.value)):
        raise NumericalError("rad_loss: loss is not finite")
    tape.backward(loss)
    anchors = batch.camera_rows
    grads = {
        "camera_rows": anchors.grad if anchors.grad is not None else np.zeros_like(anchors.value)
    }
    return LossResult(float(loss.value), grads)


def distill_metrics(batch: DistillBatch) -> tuple[float, float]:
    """Mean positive similarity and mean cross-region negative similarity."""
    c = batch.camera_rows.value
    l = batch.lidar_rows
    sims = c @ l.T
    pos = float(np.mean(np.diag(sims)))
    diff = batch.region_of[:, None] != batch.region_of[None, :]
    neg = float(sims[diff].mean()) if diff.any() else 0.0
    return pos, neg


def distill_step(
    tpc: TaggedPointCloud,
    lidar_params: LidarEncoderParams,
    model: Stage2Model,
    cfg: RadConfig,
    rng: np.random.Generator,
    raster: np.ndarray,
    optimizer_step,
    frozen_projector: ProjectorParams | None = None,
) -> dict[str, float]:
    """One gradient step on the camera encoder and its projector only.

    The LiDAR parameters are read-only; running with lidar_frozen=False
    is a contract violation because stage 2 must not touch the teacher.
    optimizer_step is a callable (grads: dict) -> None applied to the
    camera-side parameters.
    """
    if not cfg.lidar_frozen:
        raise ContractError("distill_step: lidar_frozen must be true in stage 2")
    tape = Tape()
    leaves: dict[str, Tensor] = {}
    batch = build_distill_batch(
        tpc, lidar_params, model, cfg, rng, tape, raster, leaves, frozen_projector
    )
    result = rad_loss(batch, cfg.tau, tape, within_region=cfg.within_region)
    grads = collect_grads(leaves)
    optimizer_step(grads)
    pos, neg = distill_metrics(batch)
    return {
        "loss_rad": result.value,
        "pos_sim_mean": pos,
        "neg_sim_mean": neg,
    }
