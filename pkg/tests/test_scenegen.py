import numpy as np
import pytest

from bevcontrast.errors import ConfigError, PointCloudFormatError, PointCloudParseError
from bevcontrast.scenegen import (
    LabeledScene,
    SceneSpec,
    generate_scene,
    load_point_cloud,
    save_point_cloud,
)


def test_no_objects_means_no_object_labels():
    spec = SceneSpec(n_objects=0, clutter_points=0, ground_point_density=0.2)
    scene = generate_scene(spec, seed=7)
    assert scene.points.shape[0] > 0
    assert (scene.true_membership == -1).all()


def test_determinism_bitwise():
    spec = SceneSpec()
    a = generate_scene(spec, seed=42)
    b = generate_scene(spec, seed=42)
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.true_membership, b.true_membership)
    assert a.object_centers == b.object_centers


def test_object_label_counts_within_range():
    spec = SceneSpec(n_objects=5, object_points_range=(20, 40))
    scene = generate_scene(spec, seed=11)
    labels = scene.true_membership
    ids = sorted(set(labels[labels >= 0].tolist()))
    assert ids == [0, 1, 2, 3, 4]
    for oid in ids:
        assert 20 <= (labels == oid).sum() <= 40


def test_ground_points_within_sigma():
    spec = SceneSpec(n_objects=0, clutter_points=0, ground_noise_sigma=0.03)
    scene = generate_scene(spec, seed=5)
    assert np.abs(scene.points[:, 2]).max() <= 0.03 + 1e-12


def test_object_separation_exceeds_twice_max_size():
    spec = SceneSpec()
    scene = generate_scene(spec, seed=19)
    centers = np.array(scene.object_centers)[:, :2]
    for i in range(len(centers)):
        for j in range(i + 1, len(centers)):
            assert np.hypot(*(centers[i] - centers[j])) > 2 * spec.object_size_range[1]


def test_nearest_cross_object_distance_exceeds_pooling_eps():
    scene = generate_scene(SceneSpec(), seed=23)
    labels = scene.true_membership
    for a in range(5):
        pa = scene.points[labels == a]
        for b in range(a + 1, 5):
            pb = scene.points[labels == b]
            d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1)).min()
            assert d > 0.75


def test_invalid_spec_names_field():
    with pytest.raises(ConfigError, match="n_objects"):
        generate_scene(SceneSpec(n_objects=-1), seed=0)
    with pytest.raises(ConfigError, match="object_points_range"):
        generate_scene(SceneSpec(object_points_range=(10, 5)), seed=0)
    with pytest.raises(ConfigError, match="extent_xy"):
        generate_scene(SceneSpec(extent_xy=-2.0), seed=0)


def test_load_three_column(tmp_path):
    path = tmp_path / "cloud.csv"
    path.write_text("0,0,0\n1,2,3\n")
    points, tags = load_point_cloud(str(path))
    assert points.shape == (2, 3)
    assert tags is None
    assert np.allclose(points[1], [1, 2, 3])


def test_load_four_column(tmp_path):
    path = tmp_path / "cloud.csv"
    path.write_text("0,0,0,-1\n1,2,3,0\n")
    points, tags = load_point_cloud(str(path))
    assert tags is not None
    assert tags.tolist() == [-1, 0]


def test_load_mixed_columns_rejected(tmp_path):
    path = tmp_path / "cloud.csv"
    path.write_text("0,0,0\n1,2,3,4\n")
    with pytest.raises(PointCloudFormatError, match="line 2"):
        load_point_cloud(str(path))


def test_load_malformed_row_reports_line(tmp_path):
    path = tmp_path / "cloud.csv"
    path.write_text("0,0,0\nnot,a,number\n")
    with pytest.raises(PointCloudParseError, match="line 2"):
        load_point_cloud(str(path))


def test_save_empty_cloud(tmp_path):
    path = tmp_path / "empty.csv"
    save_point_cloud(np.zeros((0, 3)), None, str(path))
    assert path.read_text() == ""
    points, tags = load_point_cloud(str(path))
    assert points.shape == (0, 3)


def test_save_formats_columns(tmp_path):
    pts = np.array([[1.5, -2.25, 0.125], [0, 0, 0], [3, 4, 5]])
    p3 = tmp_path / "three.csv"
    save_point_cloud(pts, None, str(p3))
    assert all(line.count(",") == 2 for line in p3.read_text().splitlines())
    p4 = tmp_path / "four.csv"
    save_point_cloud(pts, np.array([-1, 0, 2]), str(p4))
    lines = p4.read_text().splitlines()
    assert all(line.count(",") == 3 for line in lines)
    assert lines[0].endswith(",-1")


def test_round_trip_precision(tmp_path, rng):
    scene = generate_scene(SceneSpec(ground_point_density=0.4), seed=3)
    pts = scene.points[:1000]
    path = tmp_path / "rt.csv"
    save_point_cloud(pts, None, str(path))
    loaded, _ = load_point_cloud(str(path))
    assert np.abs(loaded - pts).max() <= 0.5e-6


def test_large_structure_points_are_unlabeled():
    scene = generate_scene(SceneSpec(large_structure=True), seed=9)
    plain = generate_scene(SceneSpec(large_structure=False), seed=9)
    assert scene.points.shape[0] > plain.points.shape[0]
    assert isinstance(scene, LabeledScene)
    # structure contributes only -1 labels
    assert set(scene.true_membership.tolist()) == set(plain.true_membership.tolist())
