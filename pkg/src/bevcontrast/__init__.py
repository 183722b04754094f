"""Two-stage contrastive pretraining for BEV perception at desk scale.

Stage 1 tags synthetic point clouds with unsupervised semantic regions
and pretrains a toy LiDAR BEV encoder with a blended point/region
contrastive objective; stage 2 distills the frozen result into a toy
camera encoder. All gradients are hand-written on a small tape engine
and verified against finite differences.
"""

__version__ = "0.1.0"

from .scenegen import SceneSpec, LabeledScene, generate_scene, load_point_cloud, save_point_cloud
from .pooling import PoolingConfig, TaggedPointCloud, RegionStats, dbscan, pool_semantics
from .augment import AugmentationSpec, sample_augmentation, apply_augmentation
from .contrast import ContrastConfig, SampledSet, EmbeddingBatch, LossResult
from .distill import RadConfig, DistillBatch
from .pipeline import TrainConfig, ModelConfig, pretrain_prc, distill_rad, linear_probe

__all__ = [
    "SceneSpec",
    "LabeledScene",
    "generate_scene",
    "load_point_cloud",
    "save_point_cloud",
    "PoolingConfig",
    "TaggedPointCloud",
    "RegionStats",
    "dbscan",
    "pool_semantics",
    "AugmentationSpec",
    "sample_augmentation",
    "apply_augmentation",
    "ContrastConfig",
    "SampledSet",
    "EmbeddingBatch",
    "LossResult",
    "RadConfig",
    "DistillBatch",
    "TrainConfig",
    "ModelConfig",
    "pretrain_prc",
    "distill_rad",
    "linear_probe",
]
