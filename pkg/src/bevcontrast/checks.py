"""Default finite-difference verification suite.

Seven compact graphs cover every differentiable path in the package:
both encoders, the projector (through batch norm and row
normalization), both stage-1 losses from raw embeddings, the full
blended stage-1 graph from points to loss, and the camera side of the
stage-2 distillation graph.

Central differences are valid only where the graph is locally smooth,
so each case is constructed by a deterministic salt search: candidate
instances are probed for ReLU-kink margins, argmax top-two gaps, and
row-norm conditioning, and the first safely-smooth instance wins. The
graphs are small enough that the whole suite runs in seconds per seed
while touching every backward rule.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .augment import AugmentationSpec, apply_augmentation
from .contrast import (
    ContrastConfig,
    PrcModel,
    SampledSet,
    plrc_weights,
    prc_objective,
    rapc_rows,
    rapc_weights,
    sample_points,
    weighted_infonce,
)
from .distill import RadConfig, Stage2Model, build_distill_batch, rad_objective
from .errors import DataWarning
from .nnet import tape as T
from .nnet.gradcheck import GradCheckReport, grad_check
from .nnet.layers import (
    GridSpec,
    camera_forward,
    init_camera_params,
    init_lidar_params,
    init_projector_params,
    lidar_forward,
    project,
)
from .nnet.tape import Tape, Tensor, probe_smoothness
from .pooling import TaggedPointCloud

GRID = GridSpec(extent_xy=4.0, h=8, w=8, c=6)
CAM_CHANNELS = 4
POINT_HIDDEN = 5
PROJ_MID = 7
PROJ_DIM = 5

RELU_MARGIN = 1e-4
ARGMAX_GAP = 1e-3
ROW_NORM_FLOOR = 1e-2
SALT_BUDGET = 32


@dataclass
class GraphCase:
    name: str
    params: dict[str, np.ndarray]
    build: Callable[[dict[str, Tensor], Tape], Tensor]


def _smooth_case(name: str, seed: int, make: Callable[[int, int], GraphCase]) -> GraphCase:
    """First salt whose instance evaluates at a safely smooth point."""
    for salt in range(SALT_BUDGET):
        case = make(seed, salt)
        tape = Tape()
        leaves = {k: tape.leaf(v.copy(), name=k) for k, v in case.params.items()}
        with probe_smoothness() as probe:
            out = case.build(leaves, tape)
        if (
            np.isfinite(out.value).all()
            and probe.min_relu_margin > RELU_MARGIN
            and probe.min_argmax_gap > ARGMAX_GAP
            and probe.min_row_norm > ROW_NORM_FLOOR
        ):
            return case
    raise RuntimeError(f"gradcheck case {name!r}: no smooth instance in {SALT_BUDGET} salts")


def _readout(values: Tensor, rng: np.random.Generator) -> Tensor:
    """Fixed random projection of a tensor to a scalar."""
    return T.tsum(T.mul(values, rng.standard_normal(values.value.shape)))


def _toy_cloud(rng: np.random.Generator) -> TaggedPointCloud:
    """Two compact regions plus six semantic-less points inside the grid."""
    c1 = rng.uniform(-2.0, -0.5, size=(6, 3)) * np.array([1, 1, 0.3]) + np.array([0, 0, 0.6])
    c2 = rng.uniform(0.5, 2.0, size=(6, 3)) * np.array([1, 1, 0.3]) + np.array([0, 0, 0.6])
    less = rng.uniform(-3.0, 3.0, size=(6, 3)) * np.array([1, 1, 0.02])
    points = np.vstack([c1, c2, less])
    tags = np.array([0] * 6 + [1] * 6 + [-1] * 6)
    return TaggedPointCloud(points, tags, {0: np.arange(6), 1: np.arange(6, 12)})


def _case_lidar(seed: int, salt: int) -> GraphCase:
    rng = np.random.default_rng([seed, 11, salt])
    points = rng.uniform(-3.5, 3.5, size=(14, 3))
    params = init_lidar_params(GRID.c, POINT_HIDDEN, rng)
    arrays = {f"lidar.{k}": v for k, v in params.trainable_dict().items()}
    probe_seed = [seed, 12, salt]

    def build(leaves, tape):
        fm = lidar_forward(points, params, GRID, tape, leaves, "lidar")
        return _readout(fm.values, np.random.default_rng(probe_seed))

    return GraphCase("lidar_forward", arrays, build)


def _case_camera(seed: int, salt: int) -> GraphCase:
    rng = np.random.default_rng([seed, 21, salt])
    raster = (rng.random((GRID.h, GRID.w)) < 0.4).astype(np.float64)
    params = init_camera_params(CAM_CHANNELS, rng)
    arrays = {f"camera.{k}": v for k, v in params.trainable_dict().items()}
    grid = GridSpec(GRID.extent_xy, GRID.h, GRID.w, CAM_CHANNELS)
    probe_seed = [seed, 22, salt]

    def build(leaves, tape):
        fm = camera_forward(raster, params, grid, tape, leaves, "camera")
        return _readout(fm.values, np.random.default_rng(probe_seed))

    return GraphCase("camera_forward", arrays, build)


def _case_project(seed: int, salt: int) -> GraphCase:
    rng = np.random.default_rng([seed, 31, salt])
    params = init_projector_params(6, PROJ_MID, PROJ_DIM, rng)
    arrays = {f"proj.{k}": v for k, v in params.trainable_dict().items()}
    arrays["input"] = rng.standard_normal((6, 6))
    probe_seed = [seed, 32, salt]

    def build(leaves, tape):
        out = project(leaves["input"], params, "train", tape, leaves, "proj")
        return _readout(out, np.random.default_rng(probe_seed))

    return GraphCase("project", arrays, build)


def _embedding_sample() -> SampledSet:
    """Synthetic 8-rich/8-less sample over 3 regions for the loss graphs."""
    region_of = np.array([0, 1, 2, 0, 1, 2, 0, 1] + [-1] * 8)
    zeros = np.zeros((16, 2))
    return SampledSet(np.arange(16), region_of, zeros, zeros, 8, 8)


def _case_plrc(seed: int, salt: int) -> GraphCase:
    rng = np.random.default_rng([seed, 41, salt])
    sample = _embedding_sample()
    arrays = {
        "z1": rng.standard_normal((16, PROJ_DIM)),
        "z2": rng.standard_normal((16, PROJ_DIM)),
    }
    w = plrc_weights(sample.region_of, sample.n_rich, sample.total)

    def build(leaves, tape):
        z1 = T.l2_normalize_rows(leaves["z1"])
        z2 = T.l2_normalize_rows(leaves["z2"])
        anchors = T.gather_rows(z1, np.arange(sample.n_rich))
        return weighted_infonce(anchors, z2, w, 0.07)

    return GraphCase("plrc_loss", arrays, build)


def _case_rapc(seed: int, salt: int) -> GraphCase:
    rng = np.random.default_rng([seed, 51, salt])
    sample = _embedding_sample()
    arrays = {
        "p1": rng.standard_normal((16, PROJ_DIM)),
        "p2": rng.standard_normal((16, PROJ_DIM)),
    }
    w = rapc_weights(sample.n_rich, sample.total)

    def build(leaves, tape):
        q1 = rapc_rows(T.l2_normalize_rows(leaves["p1"]), sample)
        q2 = rapc_rows(T.l2_normalize_rows(leaves["p2"]), sample)
        anchors = T.gather_rows(q1, np.arange(sample.n_rich))
        return weighted_infonce(anchors, q2, w, 0.07)

    return GraphCase("rapc_loss", arrays, build)


def _case_prc(seed: int, salt: int) -> GraphCase:
    rng = np.random.default_rng([seed, 61, salt])
    tpc = _toy_cloud(rng)
    view1 = apply_augmentation(tpc, AugmentationSpec(31.0, 1.05, False, True))
    view2 = apply_augmentation(tpc, AugmentationSpec(-47.0, 0.93, True, False))
    cfg = ContrastConfig(n_rich=8, n_less=8, proj_dim=PROJ_DIM)
    sample = sample_points(tpc, view1, view2, cfg, rng)
    model = PrcModel(
        lidar=init_lidar_params(GRID.c, POINT_HIDDEN, rng),
        proj_plrc=init_projector_params(GRID.c, PROJ_MID, PROJ_DIM, rng),
        proj_rapc=init_projector_params(GRID.c, PROJ_MID, PROJ_DIM, rng),
        grid=GRID,
    )
    arrays: dict[str, np.ndarray] = {}
    arrays.update({f"lidar.{k}": v for k, v in model.lidar.trainable_dict().items()})
    arrays.update({f"proj_plrc.{k}": v for k, v in model.proj_plrc.trainable_dict().items()})
    arrays.update({f"proj_rapc.{k}": v for k, v in model.proj_rapc.trainable_dict().items()})

    def build(leaves, tape):
        total, *_ = prc_objective(view1, view2, sample, model, cfg, tape, leaves)
        return total

    return GraphCase("prc_loss", arrays, build)


def _case_rad(seed: int, salt: int) -> GraphCase:
    rng = np.random.default_rng([seed, 71, salt])
    tpc = _toy_cloud(rng)
    lidar = init_lidar_params(GRID.c, POINT_HIDDEN, rng)  # frozen: not checked
    model = Stage2Model(
        camera=init_camera_params(CAM_CHANNELS, rng),
        proj_rad=init_projector_params(CAM_CHANNELS, PROJ_MID, GRID.c, rng),
        grid=GRID,
    )
    raster = (rng.random((GRID.h, GRID.w)) < 0.4).astype(np.float64)
    cfg = RadConfig(sample_per_region=4)
    sample_seed = [seed, 72, salt]
    arrays: dict[str, np.ndarray] = {}
    arrays.update({f"camera.{k}": v for k, v in model.camera.trainable_dict().items()})
    arrays.update({f"proj_rad.{k}": v for k, v in model.proj_rad.trainable_dict().items()})

    def build(leaves, tape):
        batch = build_distill_batch(
            tpc, lidar, model, cfg, np.random.default_rng(sample_seed), tape, raster, leaves
        )
        return rad_objective(batch, cfg.tau)

    return GraphCase("rad_loss", arrays, build)


CASE_BUILDERS: dict[str, Callable[[int, int], GraphCase]] = {
    "lidar_forward": _case_lidar,
    "camera_forward": _case_camera,
    "project": _case_project,
    "plrc_loss": _case_plrc,
    "rapc_loss": _case_rapc,
    "prc_loss": _case_prc,
    "rad_loss": _case_rad,
}


def default_gradcheck_cases(seed: int) -> list[GraphCase]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DataWarning)
        return [_smooth_case(name, seed, make) for name, make in CASE_BUILDERS.items()]


def run_default_gradcheck(
    seeds: list[int] | None = None,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
) -> list[tuple[str, int, GradCheckReport]]:
    """Run every default graph for every seed; returns (name, seed, report)."""
    seeds = seeds if seeds is not None else list(range(5))
    results = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DataWarning)
        for seed in seeds:
            for case in default_gradcheck_cases(seed):
                report = grad_check(case.build, case.params, eps=eps, tolerance=tolerance)
                results.append((case.name, seed, report))
    return results
