"""Flat "key = value" run configuration with full-key validation.

A config file is UTF-8 text, one key per line, '#' starts a comment.
Command-line flags override file values. Unknown keys are rejected,
and every offending key is reported at once. The fully resolved
configuration (defaults included) can be rendered back to text for
provenance.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .contrast import ContrastConfig
from .distill import RadConfig
from .errors import ConfigError
from .pipeline import ModelConfig, TrainConfig
from .pooling import PoolingConfig
from .scenegen import SceneSpec


@dataclass
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    pool: PoolingConfig = field(default_factory=PoolingConfig)
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    rad: RadConfig = field(default_factory=RadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    n_scenes: int = 20
    data_dir: str | None = None
    checkpoint_in: str | None = None
    checkpoint_out: str | None = None
    metrics_out: str | None = None
    out_dir: str | None = None


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _pair_setter(attr: str, pos: int, cast: Callable):
    def setter(rc: RunConfig, value: str):
        pair = list(getattr(rc.scene, attr))
        pair[pos] = cast(value)
        setattr(rc.scene, attr, tuple(pair))

    return setter


def _field(section: str, name: str, cast: Callable):
    def setter(rc: RunConfig, value: str):
        setattr(getattr(rc, section), name, cast(value))

    def getter(rc: RunConfig):
        return getattr(getattr(rc, section), name)

    return setter, getter


def _top(name: str, cast: Callable):
    def setter(rc: RunConfig, value: str):
        setattr(rc, name, cast(value))

    def getter(rc: RunConfig):
        return getattr(rc, name)

    return setter, getter


def _build_registry() -> dict[str, tuple]:
    reg: dict[str, tuple] = {}

    def add(key, setter, getter):
        reg[key] = (setter, getter)

    def add_field(key, section, name, cast):
        setter, getter = _field(section, name, cast)
        add(key, setter, getter)

    # scene
    add_field("extent_xy", "scene", "extent_xy", float)
    add_field("n_objects", "scene", "n_objects", int)
    add(
        "object_points_min",
        _pair_setter("object_points_range", 0, int),
        lambda rc: rc.scene.object_points_range[0],
    )
    add(
        "object_points_max",
        _pair_setter("object_points_range", 1, int),
        lambda rc: rc.scene.object_points_range[1],
    )
    add(
        "object_size_min",
        _pair_setter("object_size_range", 0, float),
        lambda rc: rc.scene.object_size_range[0],
    )
    add(
        "object_size_max",
        _pair_setter("object_size_range", 1, float),
        lambda rc: rc.scene.object_size_range[1],
    )
    add_field("ground_point_density", "scene", "ground_point_density", float)
    add_field("ground_noise_sigma", "scene", "ground_noise_sigma", float)
    add_field("clutter_points", "scene", "clutter_points", int)
    add_field("large_structure", "scene", "large_structure", _parse_bool)
    # pooling
    add_field("dbscan_eps", "pool", "dbscan_eps", float)
    add_field("dbscan_min_pts", "pool", "dbscan_min_pts", int)
    add_field("ground_inlier_threshold", "pool", "ground_inlier_threshold", float)
    add_field("ground_ransac_iters", "pool", "ground_ransac_iters", int)
    add_field("max_cluster_extent_xy", "pool", "max_cluster_extent_xy", float)
    add_field("max_cluster_base_z", "pool", "max_cluster_base_z", float)
    add_field("max_cluster_points_fraction", "pool", "max_cluster_points_fraction", float)
    # contrast
    add_field("tau", "contrast", "tau", float)
    add_field("alpha", "contrast", "alpha", float)
    add_field("n_rich", "contrast", "n_rich", int)
    add_field("n_less", "contrast", "n_less", int)
    add_field("proj_dim", "contrast", "proj_dim", int)
    # distillation
    add_field("rad_tau", "rad", "tau", float)
    add_field("sample_per_region", "rad", "sample_per_region", int)
    add_field("lidar_frozen", "rad", "lidar_frozen", _parse_bool)
    add_field("rad_target", "rad", "target", str)
    add_field("rad_within_region", "rad", "within_region", _parse_bool)
    # training
    add_field("steps", "train", "steps", int)
    add_field("batch_scenes", "train", "batch_scenes", int)
    add_field("lr", "train", "lr", float)
    add_field("grad_clip_norm", "train", "grad_clip_norm", float)
    add_field("seed", "train", "seed", int)
    add_field("optimizer", "train", "optimizer", str)
    # model
    add_field("grid_size", "model", "grid_size", int)
    add_field("grid_extent_xy", "model", "extent_xy", float)
    add_field("lidar_channels", "model", "lidar_channels", int)
    add_field("camera_channels", "model", "camera_channels", int)
    add_field("point_hidden", "model", "point_hidden", int)
    add_field("proj_mid", "model", "proj_mid", int)
    add_field("raster_flip_prob", "model", "raster_flip_prob", float)
    add_field("raster_dropout_prob", "model", "raster_dropout_prob", float)
    # top-level
    for name, cast in (
        ("n_scenes", int),
        ("data_dir", str),
        ("checkpoint_in", str),
        ("checkpoint_out", str),
        ("metrics_out", str),
        ("out_dir", str),
    ):
        setter, getter = _top(name, cast)
        add(name, setter, getter)
    return reg


_REGISTRY = _build_registry()


def parse_kv_file(path: str) -> dict[str, str]:
    """Read 'key = value' lines; '#' starts a comment anywhere."""
    pairs: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, _, value = line.partition("=")
            pairs[key.strip()] = value.strip()
    return pairs


def load_run_config(path: str | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then file values, then overrides; reject unknown keys."""
    rc = RunConfig()
    pairs: dict[str, str] = {}
    if path:
        pairs.update(parse_kv_file(path))
    explicit = set(pairs)
    if overrides:
        pairs.update({k: str(v) for k, v in overrides.items() if v is not None})
        explicit |= set(k for k, v in overrides.items() if v is not None)

    unknown = sorted(k for k in pairs if k not in _REGISTRY)
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(unknown))
    bad: list[str] = []
    for key, value in pairs.items():
        setter, _ = _REGISTRY[key]
        try:
            setter(rc, value)
        except (ValueError, TypeError) as exc:
            bad.append(f"{key} ({exc})")
    if bad:
        raise ConfigError("invalid config values: " + "; ".join(sorted(bad)))

    # the BEV grid follows the scene extent unless pinned explicitly
    if "extent_xy" in explicit and "grid_extent_xy" not in explicit:
        rc.model.extent_xy = rc.scene.extent_xy

    rc.scene.validate()
    rc.pool.validate()
    rc.contrast.validate()
    rc.rad.validate()
    rc.train.validate()
    return rc


def format_run_config(rc: RunConfig) -> str:
    """Render every known key with its resolved value, sorted."""
    lines = []
    for key in sorted(_REGISTRY):
        _, getter = _REGISTRY[key]
        value = getter(rc)
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
