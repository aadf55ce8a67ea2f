import numpy as np
import pytest

from fuselab import lidarmap
from fuselab.lidarmap import (
    DepthMaps,
    LidarMapError,
    SparseHits,
    densify,
    image_diagonal,
    maps_backward,
    normalize_backward,
    normalize_depth,
    project_points,
)
from fuselab.rng import stream
from fuselab.scenegen import DEFAULT_INTRINSICS, CameraIntrinsics, DepthStats, SceneSpec, generate_scene
from nn_oracle import densify_brute

SMALL = CameraIntrinsics(fx=20.0, fy=20.0, cx=8.0, cy=8.0, width=16, height=16)


def hits_from(rows, cols, us, vs, depths, idx=None):
    n = len(rows)
    return SparseHits(
        rows=np.asarray(rows, np.int32),
        cols=np.asarray(cols, np.int32),
        point_index=np.asarray(idx if idx is not None else range(n), np.int32),
        u=np.asarray(us, np.float32),
        v=np.asarray(vs, np.float32),
        depth=np.asarray(depths, np.float32),
    )


class TestProject:
    def test_on_axis_point(self):
        hits = project_points(np.array([[0.0, 0.0, 5.0]]), DEFAULT_INTRINSICS)
        assert len(hits) == 1
        assert (hits.cols[0], hits.rows[0]) == (64, 48)
        assert hits.depth[0] == pytest.approx(5.0)
        assert hits.u[0] == pytest.approx(64.0)

    def test_lateral_offset(self):
        hits = project_points(np.array([[1.0, 0.0, 10.0]]), DEFAULT_INTRINSICS)
        assert hits.u[0] == pytest.approx(76.0)

    def test_zbuffer_keeps_nearest(self):
        cloud = np.array([[0.0, 0.0, 9.0], [0.0, 0.0, 5.0]])
        hits = project_points(cloud, DEFAULT_INTRINSICS)
        assert len(hits) == 1
        assert hits.depth[0] == pytest.approx(5.0)
        assert hits.point_index[0] == 1

    def test_zbuffer_depth_tie_keeps_lower_index(self):
        cloud = np.array([[0.0, 0.0, 5.0], [0.0, 0.0, 5.0]])
        hits = project_points(cloud, DEFAULT_INTRINSICS)
        assert hits.point_index[0] == 0

    def test_behind_camera_dropped(self):
        cloud = np.array([[0.0, 0.0, -5.0], [0.0, 0.0, 0.0]])
        assert len(project_points(cloud, DEFAULT_INTRINSICS)) == 0

    def test_out_of_image_dropped(self):
        cloud = np.array([[50.0, 0.0, 5.0]])  # u = 120*10+64, far out
        assert len(project_points(cloud, DEFAULT_INTRINSICS)) == 0

    def test_empty_cloud(self):
        assert len(project_points(np.zeros((0, 3)), DEFAULT_INTRINSICS)) == 0

    def test_bad_shape(self):
        with pytest.raises(LidarMapError):
            project_points(np.zeros((4, 2)), DEFAULT_INTRINSICS)


class TestDensify:
    def test_no_hits(self):
        maps = densify(project_points(np.zeros((0, 3)), SMALL), 16, 16)
        assert np.all(maps.assign == -1)
        assert np.all(maps.depth == 0) and np.all(maps.distance == 0)

    def test_single_hit_floods_depth(self):
        hits = hits_from([4], [7], [7.5], [4.5], [12.0], idx=[3])
        maps = densify(hits, 16, 16)
        assert np.all(maps.depth == np.float32(12.0))
        assert np.all(maps.assign == 3)
        # distance grows radially from the continuous hit location
        assert maps.distance[4, 7] == 0.0
        assert maps.distance[4, 8] == pytest.approx(1.0)
        assert maps.distance[10, 7] == pytest.approx(6.0)
        assert maps.distance[0, 0] == pytest.approx(np.hypot(7.0, 4.0))

    def test_fully_occupied_is_identity(self):
        rows, cols = np.meshgrid(range(4), range(4), indexing="ij")
        rows, cols = rows.ravel(), cols.ravel()
        depths = np.arange(16, dtype=np.float32) + 1
        hits = hits_from(rows, cols, cols + 0.5, rows + 0.5, depths)
        maps = densify(hits, 4, 4)
        np.testing.assert_array_equal(maps.depth.ravel(), depths)
        np.testing.assert_array_equal(maps.distance, np.zeros((4, 4)))

    def test_tie_break_smaller_linear_index(self):
        # hits at (0,3) and (3,0): pixel (1,1) and (2,2) are equidistant twice
        hits = hits_from([0, 3], [3, 0], [3.5, 0.5], [0.5, 3.5], [1.0, 2.0])
        maps = densify(hits, 4, 4)
        # lin(0,3)=3 < lin(3,0)=12, so ties go to the first hit
        assert maps.depth[1, 2] == 1.0  # d2=2 vs d2=8: clear
        d2a = (2 - 0) ** 2 + (2 - 3) ** 2  # 5
        d2b = (2 - 3) ** 2 + (2 - 0) ** 2  # 5
        assert d2a == d2b
        assert maps.depth[2, 2] == 1.0

    def test_matches_brute_force_random(self):
        rng = stream(404, "densify-test")
        for trial in range(6):
            n = int(rng.integers(1, 25))
            cloud = np.stack([
                rng.uniform(-3, 3, n), rng.uniform(-3, 3, n), rng.uniform(2, 12, n),
            ], axis=1).astype(np.float32)
            hits = project_points(cloud, SMALL)
            got = densify(hits, 16, 16)
            want = densify_brute(hits, 16, 16)
            np.testing.assert_array_equal(got.assign, want.assign)
            np.testing.assert_array_equal(got.depth, want.depth)
            np.testing.assert_array_equal(got.distance, want.distance)

    def test_depth_preserved_at_hit_pixels(self):
        rng = stream(405, "hitpix")
        cloud = np.stack([
            rng.uniform(-3, 3, 30), rng.uniform(-3, 3, 30), rng.uniform(2, 12, 30),
        ], axis=1)
        hits = project_points(cloud, SMALL)
        maps = densify(hits, 16, 16)
        for k in range(len(hits)):
            assert maps.depth[hits.rows[k], hits.cols[k]] == hits.depth[k]
            assert maps.assign[hits.rows[k], hits.cols[k]] == hits.point_index[k]


class TestNormalize:
    def test_constant_depth_zeroes_channel(self):
        maps = DepthMaps(depth=np.full((4, 4), 7.0, np.float32),
                         distance=np.zeros((4, 4), np.float32),
                         assign=np.zeros((4, 4), np.int32))
        out = normalize_depth(maps, DepthStats(mean=7.0, std=2.0))
        np.testing.assert_array_equal(out[0], np.zeros((4, 4)))

    def test_identity_stats(self):
        maps = DepthMaps(depth=np.arange(16, dtype=np.float32).reshape(4, 4),
                         distance=np.zeros((4, 4), np.float32),
                         assign=np.zeros((4, 4), np.int32))
        out = normalize_depth(maps, DepthStats(mean=0.0, std=1.0))
        np.testing.assert_array_equal(out[0], maps.depth)

    def test_opposite_corner_distance_is_one(self):
        H, W = 16, 16
        hits = hits_from([0], [0], [0.5], [0.5], [5.0])
        maps = densify(hits, H, W)
        out = normalize_depth(maps, DepthStats(mean=0.0, std=1.0))
        assert out[1, H - 1, W - 1] == pytest.approx(1.0, abs=1e-6)
        assert out[1, 0, 0] == 0.0

    def test_zero_std_rejected(self):
        maps = DepthMaps(depth=np.zeros((2, 2), np.float32),
                         distance=np.zeros((2, 2), np.float32),
                         assign=np.zeros((2, 2), np.int32))
        with pytest.raises(LidarMapError):
            normalize_depth(maps, DepthStats(mean=0.0, std=0.0))


def frozen_forward(cloud64, pidx, intr, H, W):
    """Differentiable map values under a fixed pixel-to-point assignment."""
    x = cloud64[pidx, 0]
    y = cloud64[pidx, 1]
    z = cloud64[pidx, 2]
    u = intr.fx * x / z + intr.cx
    v = intr.fy * y / z + intr.cy
    rp, cp = np.meshgrid(np.arange(H, dtype=np.float64),
                         np.arange(W, dtype=np.float64), indexing="ij")
    du = u.reshape(H, W) - (cp + 0.5)
    dv = v.reshape(H, W) - (rp + 0.5)
    depth = z.reshape(H, W)
    dist = np.sqrt(du * du + dv * dv)
    return depth, dist


class TestMapsBackward:
    def random_scene(self, seed, n=25):
        rng = stream(seed, "mb")
        cloud = np.stack([
            rng.uniform(-2.5, 2.5, n), rng.uniform(-2.5, 2.5, n),
            rng.uniform(3, 12, n),
        ], axis=1).astype(np.float32)
        return cloud

    def test_depth_channel_counts_pixels(self):
        hits = hits_from([4], [7], [7.5], [4.5], [12.0], idx=[0])
        maps = densify(hits, 16, 16)
        cloud = np.array([[(-0.5 / 20) * 12, (-3.5 / 20) * 12, 12.0]], np.float32)
        grad = np.zeros((2, 16, 16), np.float32)
        grad[0] = 2.0  # every pixel assigned to the single point
        g = maps_backward(grad, hits, maps, cloud, SMALL)
        assert g[0, 2] == pytest.approx(2.0 * 256)
        assert g[0, 0] == 0.0 and g[0, 1] == 0.0

    def test_zero_distance_gives_zero_gradient(self):
        # point exactly at a pixel center: distance 0 there, subgradient 0
        z = 10.0
        x = (0.5 - SMALL.cx) / SMALL.fx * z
        y = (0.5 - SMALL.cy) / SMALL.fy * z
        cloud = np.array([[x, y, z]], np.float32)
        hits = project_points(cloud, SMALL)
        maps = densify(hits, 16, 16)
        assert maps.distance[0, 0] == 0.0
        grad = np.zeros((2, 16, 16), np.float32)
        grad[1, 0, 0] = 5.0  # only the zero-distance pixel
        g = maps_backward(grad, hits, maps, cloud, SMALL)
        np.testing.assert_array_equal(g, np.zeros((1, 3), np.float32))

    def test_linear_in_upstream_gradient(self):
        cloud = self.random_scene(1)
        hits = project_points(cloud, SMALL)
        maps = densify(hits, 16, 16)
        rng = stream(2, "lin")
        g1 = rng.normal(size=(2, 16, 16)).astype(np.float32)
        g2 = rng.normal(size=(2, 16, 16)).astype(np.float32)
        a = maps_backward(g1, hits, maps, cloud, SMALL)
        b = maps_backward(g2, hits, maps, cloud, SMALL)
        both = maps_backward(2.0 * g1 + 3.0 * g2, hits, maps, cloud, SMALL)
        np.testing.assert_allclose(both, 2.0 * a + 3.0 * b, rtol=1e-4, atol=1e-5)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_finite_differences_frozen_assignment(self, seed):
        cloud = self.random_scene(seed)
        hits = project_points(cloud, SMALL)
        maps = densify(hits, 16, 16)
        pidx = maps.assign.ravel().astype(np.int64)
        rng = stream(seed, "gmaps")
        grad = rng.normal(size=(2, 16, 16)).astype(np.float32)
        # avoid FD trouble where the norm is at or near its kink
        grad[1][maps.distance < 1e-2] = 0.0

        analytic = maps_backward(grad, hits, maps, cloud, SMALL)

        def scalar(c64):
            depth, dist = frozen_forward(c64, pidx, SMALL, 16, 16)
            return float(np.sum(grad[0].astype(np.float64) * depth)
                         + np.sum(grad[1].astype(np.float64) * dist))

        h = 1e-4
        base = cloud.astype(np.float64)
        fd = np.zeros_like(base)
        for i in range(base.shape[0]):
            for j in range(3):
                p = base.copy()
                p[i, j] += h
                m = base.copy()
                m[i, j] -= h
                fd[i, j] = (scalar(p) - scalar(m)) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), 1e-6)
        rel = np.max(np.abs(fd - analytic) / denom)
        assert rel < 1e-3, f"rel err {rel}"

    def test_full_scene_shapes(self):
        scene = generate_scene(SceneSpec(), DEFAULT_INTRINSICS, 5)
        hits, maps = lidarmap.scene_maps(scene.cloud, DEFAULT_INTRINSICS)
        grad = np.ones((2, 96, 128), np.float32)
        g = maps_backward(grad, hits, maps, scene.cloud, DEFAULT_INTRINSICS)
        assert g.shape == scene.cloud.shape
        assert np.all(np.isfinite(g))

    def test_normalize_backward_chain(self):
        stats = DepthStats(mean=5.0, std=2.0)
        g = np.ones((2, 16, 16), np.float32)
        back = normalize_backward(g, stats, 16, 16)
        assert back[0, 0, 0] == pytest.approx(0.5)
        assert back[1, 0, 0] == pytest.approx(1.0 / image_diagonal(16, 16))
