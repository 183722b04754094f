import numpy as np
import pytest

from bevcontrast.errors import CheckpointError, ContractError, DataWarning
from bevcontrast.nnet import checkpoint as ckpt
from bevcontrast.nnet import tape as T
from bevcontrast.nnet.gradcheck import grad_check
from bevcontrast.nnet.layers import (
    CameraEncoderParams,
    GridSpec,
    LidarEncoderParams,
    ProjectorParams,
    camera_forward,
    init_camera_params,
    init_lidar_params,
    init_projector_params,
    lidar_forward,
    lidar_pillar_map,
    occupancy_raster,
    project,
    wrap_params,
)
from bevcontrast.nnet.tape import Tape, Tensor

GRID = GridSpec(extent_xy=4.0, h=8, w=8, c=6)


def zero_lidar_params(c=6, hidden=5):
    return LidarEncoderParams(
        w1=np.zeros((3, hidden)),
        b1=np.zeros(hidden),
        w2=np.zeros((hidden, c)),
        b2=np.zeros(c),
        conv_k=np.zeros((3, 3, c, c)),
        conv_b=np.zeros(c),
    )


class TestGridSpec:
    def test_square_required(self):
        with pytest.raises(Exception, match="square"):
            GridSpec(4.0, 8, 16, 2)

    def test_cell_size(self):
        assert GRID.cell_size == 1.0

    def test_cell_of_boundary_points(self):
        rows, cols, inside = GRID.cell_of(np.array([[4.0, -4.0], [5.0, 0.0]]))
        assert inside.tolist() == [True, False]
        assert rows[0] == 0 and cols[0] == 7


class TestLidarForward:
    def test_zero_params_zero_map(self, rng):
        pts = rng.uniform(-3, 3, (20, 3))
        fm = lidar_forward(pts, zero_lidar_params(), GRID, Tape())
        assert not fm.values.value.any()

    def test_no_points_in_extent_warns_zero_map(self, rng):
        pts = rng.uniform(10, 20, (5, 3))
        with pytest.warns(DataWarning):
            fm = lidar_forward(pts, init_lidar_params(6, 5, rng), GRID, Tape())
        assert not fm.values.value.any()

    def test_single_point_cell_stable_within_cell(self, rng):
        params = init_lidar_params(6, 5, rng)
        base = lidar_pillar_map(np.array([[0.2, 0.2, 0.5]]), params, GRID)
        moved = lidar_pillar_map(np.array([[0.3, 0.4, 0.5]]), params, GRID)
        # pillar pooling is per cell: same nonzero cell either way
        assert np.array_equal(base != 0, moved != 0)

    def test_pillar_permutation_invariance(self, rng):
        params = init_lidar_params(6, 5, rng)
        pts = rng.uniform(-3, 3, (40, 3))
        perm = rng.permutation(40)
        a = lidar_pillar_map(pts, params, GRID)
        b = lidar_pillar_map(pts[perm], params, GRID)
        assert np.array_equal(a, b)

    def test_gradients_match_fd(self, rng):
        pts = rng.uniform(-3, 3, (12, 3))
        params = init_lidar_params(6, 5, rng)
        probe = rng.standard_normal((GRID.h, GRID.w, GRID.c))

        def build(leaves, tape):
            fm = lidar_forward(pts, params, GRID, tape, leaves, "lidar")
            return T.tsum(T.mul(fm.values, probe))

        report = grad_check(build, {f"lidar.{k}": v for k, v in params.trainable_dict().items()})
        assert report.max_rel_err < 1e-4


class TestCameraForward:
    def test_zero_raster_zero_biases(self, rng):
        params = init_camera_params(4, rng)
        params.conv1_b[:] = 0
        params.conv2_b[:] = 0
        grid = GridSpec(4.0, 8, 8, 4)
        fm = camera_forward(np.zeros((8, 8)), params, grid, Tape())
        assert not fm.values.value.any()

    def test_identity_kernel_first_stage(self, rng):
        raster = (rng.random((8, 8)) < 0.5).astype(float)
        k1 = np.zeros((3, 3, 1, 1))
        k1[1, 1, 0, 0] = 1.0
        params = CameraEncoderParams(k1, np.zeros(1), np.zeros((3, 3, 1, 1)), np.zeros(1))
        grid = GridSpec(4.0, 8, 8, 1)
        tape = Tape()
        leaves = {}
        p = wrap_params(params, tape, "camera", leaves)
        stage1 = T.relu(T.conv3x3(Tensor(raster[:, :, None]), p.conv1_k, p.conv1_b))
        assert np.array_equal(stage1.value[:, :, 0], np.maximum(raster, 0.0))

    def test_shape_mismatch_rejected(self, rng):
        params = init_camera_params(4, rng)
        grid = GridSpec(4.0, 8, 8, 4)
        with pytest.raises(ContractError):
            camera_forward(np.zeros((4, 4)), params, grid, Tape())

    def test_gradients_match_fd(self, rng):
        raster = (rng.random((8, 8)) < 0.4).astype(float)
        params = init_camera_params(3, rng)
        grid = GridSpec(4.0, 8, 8, 3)
        probe = rng.standard_normal((8, 8, 3))

        def build(leaves, tape):
            fm = camera_forward(raster, params, grid, tape, leaves, "camera")
            return T.tsum(T.mul(fm.values, probe))

        report = grad_check(build, {f"camera.{k}": v for k, v in params.trainable_dict().items()})
        assert report.max_rel_err < 1e-4


class TestOccupancyRaster:
    def test_noise_free_raster_marks_occupied_cells(self, rng):
        pts = np.array([[0.2, 0.2, 0.0], [-3.7, 3.7, 1.0]])
        occ = occupancy_raster(pts, GRID, np.random.default_rng(0), 0.0, 0.0)
        assert occ.sum() == 2.0
        rows, cols, _ = GRID.cell_of(pts[:, :2])
        assert occ[rows[0], cols[0]] == 1.0 and occ[rows[1], cols[1]] == 1.0

    def test_noise_rates(self, rng):
        pts = np.zeros((0, 3))
        big = GridSpec(4.0, 64, 64, 1)
        occ = occupancy_raster(pts, big, np.random.default_rng(1), flip_prob=0.05, dropout_prob=0.0)
        assert abs(occ.mean() - 0.05) < 0.02  # flips on an empty raster


class TestProject:
    def test_identical_rows_epsilon_variance(self, rng):
        params = init_projector_params(4, 6, 3, rng)
        x = np.tile(rng.standard_normal(4), (5, 1))
        out = project(x, params, "train", Tape())
        assert np.allclose(out.value, out.value[0])
        assert np.isfinite(out.value).all()

    def test_unit_norm_rows(self, rng):
        params = init_projector_params(4, 6, 3, rng)
        out = project(rng.standard_normal((7, 4)), params, "train", Tape())
        assert np.abs(np.linalg.norm(out.value, axis=1) - 1.0).max() < 1e-9

    def test_batch_of_one_rejected_in_train(self, rng):
        params = init_projector_params(4, 6, 3, rng)
        with pytest.raises(ContractError):
            project(rng.standard_normal((1, 4)), params, "train", Tape())
        # eval mode accepts single rows
        out = project(rng.standard_normal((1, 4)), params, "eval", Tape())
        assert out.value.shape == (1, 3)

    def test_running_stats_updated_in_train_only(self, rng):
        params = init_projector_params(4, 6, 3, rng)
        rm = params.running_mean.copy()
        project(rng.standard_normal((5, 4)), params, "eval", Tape())
        assert np.array_equal(params.running_mean, rm)
        project(rng.standard_normal((5, 4)), params, "train", Tape())
        assert not np.array_equal(params.running_mean, rm)

    def test_running_stats_momentum(self, rng):
        params = init_projector_params(4, 6, 3, rng)
        x = rng.standard_normal((50, 4))
        h = x @ params.w1 + params.b1
        project(x, params, "train", Tape())
        expected = 0.9 * np.zeros(6) + 0.1 * h.mean(axis=0)
        assert np.allclose(params.running_mean, expected)

    def test_gradients_match_fd(self, rng):
        params = init_projector_params(5, 7, 4, rng)
        x = rng.standard_normal((6, 5))
        probe = rng.standard_normal((6, 4))

        def build(leaves, tape):
            out = project(leaves["x"], params, "train", tape, leaves, "proj")
            return T.tsum(T.mul(out, probe))

        arrays = {f"proj.{k}": v for k, v in params.trainable_dict().items()}
        arrays["x"] = x
        report = grad_check(build, arrays)
        assert report.max_rel_err < 1e-4


class TestCheckpoint:
    def test_round_trip_bitwise(self, rng, tmp_path):
        params = init_lidar_params(6, 5, rng)
        path = str(tmp_path / "ck.json")
        ckpt.save_bundles(path, {"lidar": params.as_dict()})
        loaded = ckpt.load_bundles(path)
        for k, v in params.as_dict().items():
            assert np.array_equal(loaded["lidar"][k], v)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            ckpt.load_tensors(str(tmp_path / "nope.json"))

    def test_wrong_format_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format": "other", "version": 1, "tensors": {}}')
        with pytest.raises(CheckpointError):
            ckpt.load_tensors(str(path))

    def test_wrong_version_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format": "bevcontrast-checkpoint", "version": 99, "tensors": {}}')
        with pytest.raises(CheckpointError, match="version"):
            ckpt.load_tensors(str(path))

    def test_projector_round_trip_includes_running_stats(self, rng, tmp_path):
        params = init_projector_params(4, 6, 3, rng)
        project(rng.standard_normal((5, 4)), params, "train", Tape())
        path = str(tmp_path / "proj.json")
        ckpt.save_bundles(path, {"proj": params.as_dict()})
        loaded = ProjectorParams.from_dict(ckpt.load_bundles(path)["proj"])
        assert np.array_equal(loaded.running_mean, params.running_mean)
        assert np.array_equal(loaded.running_var, params.running_var)
