import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevcontrast.errors import ContractError, DataWarning
from bevcontrast.pooling import (
    PoolingConfig,
    dbscan,
    filter_clusters,
    pool_semantics,
    remove_ground,
)
from bevcontrast.scenegen import SceneSpec, generate_scene

from oracles import canonical_labels, dbscan_bruteforce


class TestRemoveGround:
    def test_perfect_plane_fully_masked(self):
        rng = np.random.default_rng(0)
        pts = np.column_stack([rng.uniform(-5, 5, (100, 2)), np.zeros(100)])
        mask = remove_ground(pts, PoolingConfig(), seed=1)
        assert mask.all()

    def test_object_points_unmasked(self):
        scene = generate_scene(SceneSpec(n_objects=1, clutter_points=0), seed=4)
        mask = remove_ground(scene.points, PoolingConfig(), seed=0)
        truth_ground = scene.true_membership == -1
        # recall and precision of the ground mask against truth
        recall = (mask & truth_ground).sum() / truth_ground.sum()
        precision = (mask & truth_ground).sum() / max(mask.sum(), 1)
        assert recall >= 0.99
        assert precision >= 0.99

    def test_two_points_warns_all_false(self):
        with pytest.warns(DataWarning):
            mask = remove_ground(np.zeros((2, 3)), PoolingConfig(), seed=0)
        assert not mask.any()

    def test_permutation_invariant_mask(self):
        scene = generate_scene(SceneSpec(), seed=8)
        rng = np.random.default_rng(3)
        perm = rng.permutation(scene.points.shape[0])
        base = remove_ground(scene.points, PoolingConfig(), seed=5)
        permuted = remove_ground(scene.points[perm], PoolingConfig(), seed=5)
        assert np.array_equal(permuted, base[perm])


class TestDbscan:
    def test_five_identical_points_one_cluster(self):
        pts = np.zeros((5, 3))
        assert dbscan(pts, eps=0.75, min_pts=5).tolist() == [0] * 5

    def test_no_core_point_all_noise(self):
        pts = np.vstack([np.zeros((4, 3)), [[100.0, 0, 0]]])
        assert dbscan(pts, eps=0.75, min_pts=5).tolist() == [-1] * 5

    def test_two_balls(self, rng):
        a = rng.normal(0, 0.2, (100, 3))
        b = rng.normal(0, 0.2, (100, 3)) + np.array([10.0, 0, 0])
        pts = np.vstack([a, b])
        labels = dbscan(pts, eps=0.75, min_pts=5)
        assert set(labels.tolist()) == {0, 1}
        assert (labels[:100] == labels[0]).all()
        assert (labels[100:] == labels[100]).all()
        ref = dbscan_bruteforce(pts, 0.75, 5)
        assert np.array_equal(canonical_labels(labels), canonical_labels(ref))

    def test_empty_input(self):
        assert dbscan(np.zeros((0, 3)), 0.5, 3).size == 0

    def test_invalid_args(self):
        with pytest.raises(ContractError):
            dbscan(np.zeros((3, 3)), eps=0.0, min_pts=1)
        with pytest.raises(ContractError):
            dbscan(np.zeros((3, 3)), eps=1.0, min_pts=0)

    def test_eps_boundary_inclusive(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        labels = dbscan(pts, eps=1.0, min_pts=3)
        assert labels.tolist() == [0, 0, 0]

    @pytest.mark.parametrize("seed", range(12))
    def test_matches_bruteforce_random(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(20, 200))
        # mixed density: tight clumps plus uniform noise
        clumps = [
            rng.normal(rng.uniform(-4, 4, 3), rng.uniform(0.1, 0.6), (int(rng.integers(5, 30)), 3))
            for _ in range(int(rng.integers(1, 5)))
        ]
        noise = rng.uniform(-5, 5, (n, 3))
        pts = np.vstack(clumps + [noise])
        eps = float(rng.uniform(0.3, 1.2))
        min_pts = int(rng.integers(2, 8))
        mine = dbscan(pts, eps, min_pts)
        ref = dbscan_bruteforce(pts, eps, min_pts)
        assert np.array_equal(canonical_labels(mine), canonical_labels(ref))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.3, 1.5), st.integers(1, 6))
    def test_matches_bruteforce_property(self, seed, eps, min_pts):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-3, 3, (int(rng.integers(5, 80)), 3))
        mine = dbscan(pts, eps, min_pts)
        ref = dbscan_bruteforce(pts, eps, min_pts)
        assert np.array_equal(canonical_labels(mine), canonical_labels(ref))


class TestFilterClusters:
    def test_oversized_cluster_rejected(self):
        rng = np.random.default_rng(1)
        pts = np.column_stack([rng.uniform(0, 15, 50), rng.uniform(0, 15, 50), rng.uniform(0.3, 1, 50)])
        labels = np.zeros(50, dtype=np.int64)
        assert filter_clusters(pts, labels, PoolingConfig()) == []

    def test_compact_low_cluster_kept(self):
        rng = np.random.default_rng(2)
        cluster = rng.uniform(0, 1, (30, 3)) + np.array([0, 0, 0.3])
        labels = np.full(30, 0, dtype=np.int64)
        total = np.vstack([cluster, rng.uniform(-20, 20, (170, 3))])
        all_labels = np.concatenate([labels, np.full(170, -1)])
        assert filter_clusters(total, all_labels, PoolingConfig()) == [0]

    def test_high_floating_cluster_rejected(self):
        rng = np.random.default_rng(3)
        cluster = rng.uniform(0, 1, (30, 3)) + np.array([0, 0, 2.5])
        labels = np.zeros(30, dtype=np.int64)
        assert filter_clusters(cluster, labels, PoolingConfig()) == []

    def test_count_cap_rejects_dominant_cluster(self):
        rng = np.random.default_rng(4)
        big = rng.uniform(0, 2, (90, 3)) + np.array([0, 0, 0.3])
        small = rng.uniform(0, 1, (10, 3)) + np.array([8, 8, 0.3])
        pts = np.vstack([big, small])
        labels = np.concatenate([np.zeros(90, dtype=np.int64), np.ones(10, dtype=np.int64)])
        kept = filter_clusters(pts, labels, PoolingConfig())
        assert kept == [1]  # 90 of 100 points exceeds the 25% cap

    def test_kept_ids_dense_in_original_order(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(0, 1, (20, 3)) + np.array([0, 0, 0.3])
        b = rng.uniform(0, 1, (20, 3)) + np.array([5, 5, 2.6])  # floats high: rejected
        c = rng.uniform(0, 1, (20, 3)) + np.array([10, 10, 0.3])
        pts = np.vstack([a, b, c, rng.uniform(-20, 20, (140, 3))])
        labels = np.concatenate(
            [np.zeros(20), np.ones(20), np.full(20, 2), np.full(140, -1)]
        ).astype(np.int64)
        assert filter_clusters(pts, labels, PoolingConfig()) == [0, 2]


class TestPoolSemantics:
    def test_all_ground_scene_zero_regions(self):
        scene = generate_scene(SceneSpec(n_objects=0, clutter_points=0), seed=2)
        tpc, stats = pool_semantics(scene.points, PoolingConfig(), seed=0)
        assert stats.n_regions == 0
        assert (tpc.tags == -1).all()

    def test_empty_cloud_rejected(self):
        with pytest.raises(ContractError):
            pool_semantics(np.zeros((0, 3)), PoolingConfig(), seed=0)

    def test_deterministic(self):
        scene = generate_scene(SceneSpec(), seed=6)
        a, _ = pool_semantics(scene.points, PoolingConfig(), seed=3)
        b, _ = pool_semantics(scene.points, PoolingConfig(), seed=3)
        assert np.array_equal(a.tags, b.tags)

    def test_region_index_consistent_and_min_pts(self):
        scene = generate_scene(SceneSpec(), seed=13)
        cfg = PoolingConfig()
        tpc, stats = pool_semantics(scene.points, cfg, seed=1)
        assert stats.n_regions == len(tpc.region_index)
        for rid, idx in tpc.region_index.items():
            assert (tpc.tags[idx] == rid).all()
            assert idx.size >= cfg.dbscan_min_pts
        assert stats.points_per_region == [tpc.region_index[r].size for r in sorted(tpc.region_index)]

    def test_ground_points_never_tagged(self):
        scene = generate_scene(SceneSpec(), seed=17)
        cfg = PoolingConfig()
        ground = remove_ground(scene.points, cfg, seed=4)
        tpc, _ = pool_semantics(scene.points, cfg, seed=4)
        assert (tpc.tags[ground] == -1).all()

    def test_partition_invariant_under_permutation(self):
        scene = generate_scene(SceneSpec(), seed=21)
        cfg = PoolingConfig()
        base, _ = pool_semantics(scene.points, cfg, seed=9)
        rng = np.random.default_rng(0)
        for _ in range(3):
            perm = rng.permutation(scene.points.shape[0])
            permuted, _ = pool_semantics(scene.points[perm], cfg, seed=9)
            assert np.array_equal(
                canonical_labels(permuted.tags), canonical_labels(base.tags[perm])
            )
