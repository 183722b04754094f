"""Differentiable-computation layer: tape engine, toy encoders, projectors."""

from .tape import Tape, Tensor
from .layers import (
    GridSpec,
    FeatureMap,
    LidarEncoderParams,
    CameraEncoderParams,
    ProjectorParams,
    init_lidar_params,
    init_camera_params,
    init_projector_params,
    wrap_params,
    collect_grads,
    lidar_forward,
    camera_forward,
    occupancy_raster,
    project,
    encode_lidar_values,
)
from .gradcheck import grad_check, GradCheckReport
from . import checkpoint

__all__ = [
    "Tape",
    "Tensor",
    "GridSpec",
    "FeatureMap",
    "LidarEncoderParams",
    "CameraEncoderParams",
    "ProjectorParams",
    "init_lidar_params",
    "init_camera_params",
    "init_projector_params",
    "wrap_params",
    "collect_grads",
    "lidar_forward",
    "camera_forward",
    "occupancy_raster",
    "project",
    "encode_lidar_values",
    "grad_check",
    "GradCheckReport",
    "checkpoint",
]
