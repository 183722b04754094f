"""Two-stage training orchestration, optimizer, and the linear probe.

Stage 1 pretrains the LiDAR encoder plus its two projectors with the
blended contrastive objective; stage 2 loads that checkpoint read-only
and distills into the camera branch. Every random draw is derived from
the run seed, scene pooling is computed once per scene, and metrics go
to JSONL, so identical configurations reproduce bitwise-identical runs.
"""
from __future__ import annotations

import json
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .augment import apply_augmentation, sample_augmentation
from .contrast import ContrastConfig, PrcModel, prc_loss, sample_points
from .distill import RadConfig, Stage2Model, build_distill_batch, distill_metrics, rad_loss
from .errors import CheckpointError, ConfigError, DataWarning, NoRegionsError
from .nnet import checkpoint as ckpt
from .nnet.layers import (
    CameraEncoderParams,
    GridSpec,
    LidarEncoderParams,
    ProjectorParams,
    collect_grads,
    encode_lidar_values,
    init_camera_params,
    init_lidar_params,
    init_projector_params,
    occupancy_raster,
)
from .nnet.tape import Tape, Tensor
from .pooling import PoolingConfig, pool_semantics
from .scenegen import LabeledScene

# rng stream salts: one namespace per purpose, all derived from the run seed
POOL_SALT = 101
AUG_SALT = 102
SAMPLE_SALT = 103
RASTER_SALT = 104
INIT_SALT = 105
PROBE_SALT = 106

SKIP_WINDOW = 20


def derive_seed(*parts: int) -> int:
    """Deterministic child seed from non-negative integer parts."""
    return int(np.random.default_rng(list(parts)).integers(0, 2**63))


@dataclass
class TrainConfig:
    stage: str = "prc"
    steps: int = 200
    batch_scenes: int = 4
    lr: float = 2e-4
    grad_clip_norm: float = 35.0
    seed: int = 0
    optimizer: str = "adam"

    def validate(self) -> None:
        if self.stage not in ("prc", "rad"):
            raise ConfigError("stage: must be 'prc' or 'rad'")
        if self.steps < 1:
            raise ConfigError("steps: must be at least 1")
        if self.batch_scenes < 1:
            raise ConfigError("batch_scenes: must be at least 1")
        if self.lr <= 0:
            raise ConfigError("lr: must be positive")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm: must be positive")
        if self.seed < 0:
            raise ConfigError("seed: must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer: must be 'adam' or 'sgd'")


@dataclass
class ModelConfig:
    """Desk-scale architecture knobs shared by both stages."""

    grid_size: int = 32
    extent_xy: float = 20.0
    lidar_channels: int = 16
    camera_channels: int = 8
    point_hidden: int = 32
    proj_mid: int = 64
    init_scale: float = 1.0
    camera_init_scale: float | None = None  # falls back to init_scale
    raster_flip_prob: float = 0.05
    raster_dropout_prob: float = 0.1

    def grid(self, channels: int | None = None) -> GridSpec:
        return GridSpec(
            self.extent_xy, self.grid_size, self.grid_size,
            self.lidar_channels if channels is None else channels,
        )


@dataclass
class MetricsRecord:
    step: int
    loss_total: float
    grad_norm_preclip: float
    pos_sim_mean: float
    neg_sim_mean: float
    loss_plrc: float | None = None
    loss_rapc: float | None = None
    loss_rad: float | None = None

    def to_dict(self) -> dict[str, float]:
        out = {
            "step": self.step,
            "loss_total": self.loss_total,
            "grad_norm_preclip": self.grad_norm_preclip,
            "pos_sim_mean": self.pos_sim_mean,
            "neg_sim_mean": self.neg_sim_mean,
        }
        for key in ("loss_plrc", "loss_rapc", "loss_rad"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        return out


def write_metrics_jsonl(path: str, records: Iterable[MetricsRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


# --- gradient plumbing ---


def flatten_bundles(bundles: dict[str, object]) -> dict[str, np.ndarray]:
    """Name -> array view over the trainable tensors of several bundles."""
    flat: dict[str, np.ndarray] = {}
    for prefix, params in bundles.items():
        for name, arr in params.trainable_dict().items():
            flat[f"{prefix}.{name}"] = arr
    return flat


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    return float(np.sqrt(total))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients by max_norm/||g|| when the global norm exceeds it."""
    if max_norm <= 0:
        raise ConfigError("max_norm: must be positive")
    norm = global_grad_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


class Optimizer:
    """In-place SGD or Adam-style updates over a flat parameter dict."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        kind: str = "adam",
        lr: float = 2e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if kind not in ("adam", "sgd"):
            raise ConfigError("optimizer: must be 'adam' or 'sgd'")
        self.params = params
        self.kind = kind
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        if self.kind == "sgd":
            for k, p in self.params.items():
                p -= self.lr * grads[k]
            return
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _scene_points(scene) -> np.ndarray:
    return scene.points if isinstance(scene, LabeledScene) else np.asarray(scene, dtype=np.float64)


def _pool_dataset(dataset: Sequence, pool_cfg: PoolingConfig, seed: int):
    pooled = []
    for i, scene in enumerate(dataset):
        pooled.append(pool_semantics(_scene_points(scene), pool_cfg, derive_seed(seed, POOL_SALT, i)))
    return pooled


class _SkipTracker:
    """Aborts when more than half of a recent step window was skipped."""

    def __init__(self, window: int = SKIP_WINDOW):
        self.window = deque(maxlen=window)

    def record(self, skipped: bool) -> None:
        self.window.append(1 if skipped else 0)
        if len(self.window) == self.window.maxlen and sum(self.window) * 2 > len(self.window):
            raise RuntimeError(
                "training aborted: more than 50% of the last "
                f"{len(self.window)} steps had no usable scene (no pooled regions)"
            )


def pretrain_prc(
    dataset: Sequence,
    cfg: TrainConfig,
    contrast_cfg: ContrastConfig,
    pool_cfg: PoolingConfig | None = None,
    model_cfg: ModelConfig | None = None,
) -> tuple[LidarEncoderParams, tuple[ProjectorParams, ProjectorParams], list[MetricsRecord]]:
    """Stage 1: train the LiDAR encoder and both projectors."""
    cfg.validate()
    contrast_cfg.validate()
    if cfg.stage != "prc":
        raise ConfigError("stage: pretrain_prc requires stage='prc'")
    if not dataset:
        raise ConfigError("dataset: must not be empty")
    pool_cfg = pool_cfg or PoolingConfig()
    model_cfg = model_cfg or ModelConfig()

    grid = model_cfg.grid()
    rng_init = np.random.default_rng([cfg.seed, INIT_SALT])
    model = PrcModel(
        lidar=init_lidar_params(
            model_cfg.lidar_channels, model_cfg.point_hidden, rng_init, model_cfg.init_scale
        ),
        proj_plrc=init_projector_params(
            model_cfg.lidar_channels, model_cfg.proj_mid, contrast_cfg.proj_dim,
            rng_init, model_cfg.init_scale,
        ),
        proj_rapc=init_projector_params(
            model_cfg.lidar_channels, model_cfg.proj_mid, contrast_cfg.proj_dim,
            rng_init, model_cfg.init_scale,
        ),
        grid=grid,
    )
    pooled = _pool_dataset(dataset, pool_cfg, cfg.seed)

    flat = flatten_bundles(
        {"lidar": model.lidar, "proj_plrc": model.proj_plrc, "proj_rapc": model.proj_rapc}
    )
    opt = Optimizer(flat, cfg.optimizer, cfg.lr)
    metrics: list[MetricsRecord] = []
    skips = _SkipTracker()

    for step in range(cfg.steps):
        grad_sum: dict[str, np.ndarray] | None = None
        sums = {"loss": 0.0, "plrc": 0.0, "rapc": 0.0, "pos": 0.0, "neg": 0.0}
        used = 0
        for k in range(cfg.batch_scenes):
            idx = (step * cfg.batch_scenes + k) % len(dataset)
            tpc, stats = pooled[idx]
            if stats.n_regions == 0:
                continue
            rng_aug = np.random.default_rng([cfg.seed, AUG_SALT, step, idx])
            view1 = apply_augmentation(tpc, sample_augmentation(rng_aug))
            view2 = apply_augmentation(tpc, sample_augmentation(rng_aug))
            rng_sample = np.random.default_rng([cfg.seed, SAMPLE_SALT, step, idx])
            sample = sample_points(tpc, view1, view2, contrast_cfg, rng_sample)
            result = prc_loss(view1, view2, sample, model, contrast_cfg, Tape())
            if grad_sum is None:
                grad_sum = result.gradients
            else:
                for name, g in result.gradients.items():
                    grad_sum[name] = grad_sum[name] + g
            sums["loss"] += result.value
            sums["plrc"] += result.aux["loss_plrc"]
            sums["rapc"] += result.aux["loss_rapc"]
            sums["pos"] += result.aux["pos_sim_mean"]
            sums["neg"] += result.aux["neg_sim_mean"]
            used += 1
        if used == 0:
            warnings.warn(f"pretrain step {step}: every scene in the batch had no regions", DataWarning)
            skips.record(True)
            continue
        skips.record(False)
        grads = {k: g / used for k, g in grad_sum.items()}
        pre_norm = global_grad_norm(grads)
        opt.step(clip_gradients(grads, cfg.grad_clip_norm))
        metrics.append(
            MetricsRecord(
                step=step,
                loss_total=sums["loss"] / used,
                grad_norm_preclip=pre_norm,
                pos_sim_mean=sums["pos"] / used,
                neg_sim_mean=sums["neg"] / used,
                loss_plrc=sums["plrc"] / used,
                loss_rapc=sums["rapc"] / used,
            )
        )
    return model.lidar, (model.proj_plrc, model.proj_rapc), metrics


def save_stage1_checkpoint(
    path: str,
    lidar: LidarEncoderParams,
    proj_plrc: ProjectorParams,
    proj_rapc: ProjectorParams,
) -> None:
    ckpt.save_bundles(
        path,
        {
            "lidar": lidar.as_dict(),
            "proj_plrc": proj_plrc.as_dict(),
            "proj_rapc": proj_rapc.as_dict(),
        },
    )


def load_stage1_checkpoint(path: str) -> tuple[LidarEncoderParams, ProjectorParams, ProjectorParams]:
    bundles = ckpt.load_bundles(path)
    try:
        return (
            LidarEncoderParams.from_dict(bundles["lidar"]),
            ProjectorParams.from_dict(bundles["proj_plrc"]),
            ProjectorParams.from_dict(bundles["proj_rapc"]),
        )
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: not a stage-1 checkpoint ({exc})") from exc


def save_stage2_checkpoint(path: str, camera: CameraEncoderParams, proj_rad: ProjectorParams) -> None:
    ckpt.save_bundles(path, {"camera": camera.as_dict(), "proj_rad": proj_rad.as_dict()})


def distill_rad(
    dataset: Sequence,
    lidar_checkpoint: str,
    cfg: TrainConfig,
    rad_cfg: RadConfig,
    pool_cfg: PoolingConfig | None = None,
    model_cfg: ModelConfig | None = None,
) -> tuple[CameraEncoderParams, ProjectorParams, list[MetricsRecord]]:
    """Stage 2: distill a frozen stage-1 LiDAR branch into the camera branch."""
    cfg.validate()
    rad_cfg.validate()
    if cfg.stage != "rad":
        raise ConfigError("stage: distill_rad requires stage='rad'")
    if not rad_cfg.lidar_frozen:
        raise ConfigError("lidar_frozen: stage 2 requires the LiDAR branch frozen")
    if not dataset:
        raise ConfigError("dataset: must not be empty")
    pool_cfg = pool_cfg or PoolingConfig()
    model_cfg = model_cfg or ModelConfig()

    lidar, proj_plrc, _ = load_stage1_checkpoint(lidar_checkpoint)
    frozen_projector = proj_plrc if rad_cfg.target == "projected" else None
    target_dim = proj_plrc.w2.shape[1] if rad_cfg.target == "projected" else model_cfg.lidar_channels

    grid = model_cfg.grid()
    rng_init = np.random.default_rng([cfg.seed, INIT_SALT])
    cam_scale = (
        model_cfg.camera_init_scale
        if model_cfg.camera_init_scale is not None
        else model_cfg.init_scale
    )
    model = Stage2Model(
        camera=init_camera_params(model_cfg.camera_channels, rng_init, cam_scale),
        proj_rad=init_projector_params(
            model_cfg.camera_channels, model_cfg.proj_mid, target_dim,
            rng_init, cam_scale,
        ),
        grid=grid,
    )
    pooled = _pool_dataset(dataset, pool_cfg, cfg.seed)
    rasters = [
        occupancy_raster(
            _scene_points(scene),
            grid,
            np.random.default_rng([cfg.seed, RASTER_SALT, i]),
            model_cfg.raster_flip_prob,
            model_cfg.raster_dropout_prob,
        )
        for i, scene in enumerate(dataset)
    ]

    flat = flatten_bundles({"camera": model.camera, "proj_rad": model.proj_rad})
    opt = Optimizer(flat, cfg.optimizer, cfg.lr)
    metrics: list[MetricsRecord] = []
    skips = _SkipTracker()

    for step in range(cfg.steps):
        grad_sum: dict[str, np.ndarray] | None = None
        sums = {"loss": 0.0, "pos": 0.0, "neg": 0.0}
        used = 0
        for k in range(cfg.batch_scenes):
            idx = (step * cfg.batch_scenes + k) % len(dataset)
            tpc, stats = pooled[idx]
            if stats.n_regions == 0:
                continue
            rng_sample = np.random.default_rng([cfg.seed, SAMPLE_SALT, step, idx])
            tape = Tape()
            leaves: dict[str, Tensor] = {}
            batch = build_distill_batch(
                tpc, lidar, model, rad_cfg, rng_sample, tape, rasters[idx], leaves,
                frozen_projector,
            )
            result = rad_loss(batch, rad_cfg.tau, tape, within_region=rad_cfg.within_region)
            grads = collect_grads(leaves)
            if grad_sum is None:
                grad_sum = grads
            else:
                for name, g in grads.items():
                    grad_sum[name] = grad_sum[name] + g
            pos, neg = distill_metrics(batch)
            sums["loss"] += result.value
            sums["pos"] += pos
            sums["neg"] += neg
            used += 1
        if used == 0:
            warnings.warn(f"distill step {step}: every scene in the batch had no regions", DataWarning)
            skips.record(True)
            continue
        skips.record(False)
        grads = {k: g / used for k, g in grad_sum.items()}
        pre_norm = global_grad_norm(grads)
        opt.step(clip_gradients(grads, cfg.grad_clip_norm))
        metrics.append(
            MetricsRecord(
                step=step,
                loss_total=sums["loss"] / used,
                grad_norm_preclip=pre_norm,
                pos_sim_mean=sums["pos"] / used,
                neg_sim_mean=sums["neg"] / used,
                loss_rad=sums["loss"] / used,
            )
        )
    return model.camera, model.proj_rad, metrics


# --- linear probe ---


def make_features_fn(lidar: LidarEncoderParams, grid: GridSpec) -> Callable[[LabeledScene], np.ndarray]:
    """Frozen per-cell BEV features from a (possibly untrained) encoder."""
    return lambda scene: encode_lidar_values(scene.points, lidar, grid)


def cell_object_labels(scene: LabeledScene, grid: GridSpec) -> np.ndarray:
    """1 where a grid cell contains at least one true object point."""
    labels = np.zeros(grid.h * grid.w)
    obj = scene.true_membership >= 0
    if obj.any():
        rows, cols, inside = grid.cell_of(scene.points[obj][:, :2])
        cells = rows[inside] * grid.w + cols[inside]
        labels[cells] = 1.0
    return labels


def _balanced_subset(y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    pos = np.flatnonzero(y > 0.5)
    neg = np.flatnonzero(y <= 0.5)
    take = min(pos.size, neg.size)
    picks = np.concatenate([
        rng.choice(pos, size=take, replace=False),
        rng.choice(neg, size=take, replace=False),
    ])
    picks.sort()
    return picks


def _fit_logistic(x: np.ndarray, y: np.ndarray, iters: int = 400, lr: float = 0.05) -> np.ndarray:
    """Full-batch Adam on the (convex) logistic loss; returns weights+bias."""
    xb = np.hstack([x, np.ones((x.shape[0], 1))])
    w = np.zeros(xb.shape[1])
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t in range(1, iters + 1):
        p = 1.0 / (1.0 + np.exp(-(xb @ w)))
        g = xb.T @ (p - y) / xb.shape[0]
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    return w


def linear_probe(
    features_fn: Callable[[LabeledScene], np.ndarray],
    labeled_scenes: Sequence[LabeledScene],
    seed: int,
    grid: GridSpec | None = None,
    shuffle_labels: bool = False,
) -> float:
    """Accuracy of a linear classifier on frozen per-cell features.

    Task: does the cell overlap a true object footprint. Scenes are
    split 70/30 into train/held-out, classes are balanced by
    subsampling the majority within each side, features standardized by
    train statistics. All draws derive from the seed.
    """
    if len(labeled_scenes) < 2:
        raise ConfigError("labeled_scenes: need at least 2 scenes to split")
    feats = [np.asarray(features_fn(s), dtype=np.float64) for s in labeled_scenes]
    h, w, c = feats[0].shape
    if grid is None:
        grid = GridSpec(ModelConfig().extent_xy, h, w, c)
    xs = [f.reshape(-1, c) for f in feats]
    ys = [cell_object_labels(s, grid) for s in labeled_scenes]

    for attempt in range(5):
        rng = np.random.default_rng([seed, PROBE_SALT, attempt])
        perm = rng.permutation(len(labeled_scenes))
        n_test = max(1, int(round(0.3 * len(labeled_scenes))))
        test_ids, train_ids = perm[:n_test], perm[n_test:]
        x_tr = np.vstack([xs[i] for i in train_ids])
        y_tr = np.concatenate([ys[i] for i in train_ids])
        x_te = np.vstack([xs[i] for i in test_ids])
        y_te = np.concatenate([ys[i] for i in test_ids])
        if y_tr.mean() >= 0.01 and y_te.mean() >= 0.01:
            break
        warnings.warn(
            f"linear_probe: split has under 1% positive cells, regenerating (attempt {attempt})",
            DataWarning,
        )
    if shuffle_labels:
        y_tr = y_tr[rng.permutation(y_tr.size)]
        y_te = y_te[rng.permutation(y_te.size)]

    tr_pick = _balanced_subset(y_tr, rng)
    te_pick = _balanced_subset(y_te, rng)
    x_tr, y_tr = x_tr[tr_pick], y_tr[tr_pick]
    x_te, y_te = x_te[te_pick], y_te[te_pick]

    mu = x_tr.mean(axis=0)
    sd = x_tr.std(axis=0)
    sd[sd == 0] = 1.0
    w_fit = _fit_logistic((x_tr - mu) / sd, y_tr)
    xb = np.hstack([(x_te - mu) / sd, np.ones((x_te.shape[0], 1))])
    pred = (xb @ w_fit) >= 0.0
    return float((pred == (y_te > 0.5)).mean())
