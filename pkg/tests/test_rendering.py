import numpy as np
import pytest

from bevocc.errors import ConfigError
from bevocc.geometry import DESK_ROI, PAPER_ROI, Ray, RayBatch, grid_dims, rays_from_cloud
from bevocc.rendering import (
    RayRenderConfig,
    VoxelRenderConfig,
    composite,
    dump_ray_samples,
    oracle_field,
    ray_samples,
    render_depths,
    render_point_cloud,
    render_ray_depth,
    render_voxel_grid,
    voxel_scores,
)
from bevocc.simulator import Box, SceneSpec, default_rig, generate_scene, simulate_lidar


def wall_scene(x=5.0):
    return SceneSpec((Box((x + 0.5, 0.0, 2.0), (1.0, 30.0, 6.0)),), cameras=default_rig())


class TestComposite:
    def test_opaque_wall(self):
        d, w, _, _ = composite([0, 1, 0], [1, 2, 3])
        assert (d, w) == (2.0, 1.0)

    def test_half_occupancies(self):
        d, w, weights, trans = composite([0.5, 0.5, 1.0], [1, 2, 3])
        np.testing.assert_allclose(weights, [0.5, 0.25, 0.25])
        assert d == pytest.approx(1.75) and w == pytest.approx(1.0)
        np.testing.assert_allclose(trans, [1.0, 0.5, 0.25])

    def test_empty(self):
        d, w, _, _ = composite([0, 0, 0], [1, 2, 3])
        assert (d, w) == (0.0, 0.0)


class TestRays:
    def test_wall_depth_within_step(self):
        s = wall_scene()
        res = render_ray_depth(oracle_field(s), Ray((0, 0, 1.0), (1, 0, 0)), RayRenderConfig(),
                               s.roi)
        assert abs(res.depth - 5.0) <= 0.05 and res.weight == 1.0 and res.intersects

    def test_miss_roi(self):
        res = render_ray_depth(lambda p: np.ones(len(p)), Ray((0, 0, 30.0), (0, 0, 1)))
        assert res == (0.0, 0.0, False)

    def test_windowed_equals_single_pass(self):
        field = lambda p: 0.02 * (1 + np.sin(p[:, 0]) * np.cos(p[:, 1]))  # noqa: E731
        ray = Ray((0.0, 0.0, 1.0), (0.6, 0.8, 0.0))
        s = ray_samples(field, ray)
        d, w, _, _ = composite(s["occupancy"], s["t"])
        res = render_ray_depth(field, ray)
        assert res.depth == pytest.approx(d, rel=1e-12)
        assert res.weight == pytest.approx(w, rel=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_transmittance_monotone_and_weight_bounded(self, seed):
        rng = np.random.default_rng(seed)
        field = lambda p: rng.random(len(p)) * 0.2  # noqa: E731
        s = ray_samples(field, Ray((0.0, 0.0, 1.0), (1.0, 0.0, 0.0)))
        assert np.all(np.diff(s["transmittance"]) <= 0)
        assert s["weight"].sum() <= 1.0 + 1e-12

    @pytest.mark.parametrize("seed", range(3))
    def test_oracle_matches_cast_for_penetrating_rays(self, seed):
        s = generate_scene(seed)
        rays = rays_from_cloud(simulate_lidar(s))
        rays = rays.subset(np.flatnonzero(s.roi.contains(rays.points())))
        res = render_depths(oracle_field(s), rays, RayRenderConfig(), s.roi)
        err = np.abs(res.depth - rays.hit_distance)
        # a ray whose chord through the first solid is shorter than the step may skip it
        probe = rays.points(rays.hit_distance + 0.0499)
        deep = s.occupied(probe) & s.occupied(rays.points(rays.hit_distance + 0.025))
        assert deep.mean() > 0.95
        assert np.all(err[deep] <= 0.05)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            RayRenderConfig(step=0)


class TestPointCloud:
    def test_empty(self):
        out = render_point_cloud(oracle_field(wall_scene()), RayBatch(np.zeros((0, 3)),
                                                                      np.zeros((0, 3))))
        assert len(out.cloud) == 0 and out.dropped == 0

    def test_sky_rays_dropped(self):
        s = wall_scene()
        rays = RayBatch(np.array([[0, 0, 1.0], [0, 0, 1.0]]), [[1, 0, 0], [0, 0, 1]])
        out = render_point_cloud(oracle_field(s), rays, roi=s.roi)
        assert out.dropped == 1 and len(out.cloud) == 1
        assert abs(out.cloud.points[0, 0] - 5.0) <= 0.05

    def test_csv_dump(self, tmp_path):
        s = wall_scene()
        path = tmp_path / "ray.csv"
        dump_ray_samples(path, oracle_field(s), Ray((0, 0, 1.0), (1, 0, 0)), roi=s.roi)
        lines = path.read_text().splitlines()
        assert lines[0] == "t,occupancy,transmittance,weight"
        assert len(lines) == 1 + 321


class TestVoxels:
    def test_constant_field(self):
        g = render_voxel_grid(lambda p: np.full(len(p), 0.9), DESK_ROI, 0.8)
        assert g.occupancy.all() and g.dims == (40, 40, 8)

    def test_paper_dims(self):
        assert grid_dims(PAPER_ROI, 0.4) == (200, 200, 16)

    def test_max_catches_spike(self):
        # spike filling 1/8 of one voxel's volume: mean of samples stays low, max fires
        roi = DESK_ROI
        corner = roi.lo + np.array([0.0, 0.0, 0.0])
        spike = lambda p: np.where(np.all((p >= corner) & (p < corner + 0.2), axis=1), 0.9, 0.0)  # noqa
        cfg = VoxelRenderConfig(samples=64, seed=1)
        scores = voxel_scores(spike, roi, 0.4, cfg)
        assert scores[0, 0, 0] == 0.9
        g = render_voxel_grid(spike, roi, 0.4, cfg)
        assert g.occupancy[0, 0, 0] and g.occupancy.sum() == 1

    def test_monotone_in_field(self):
        f = lambda p: 0.5 + 0.5 * np.sin(p[:, 0]) * np.cos(p[:, 2])  # noqa: E731
        g = lambda p: np.minimum(1.0, f(p) + 0.1)  # noqa: E731
        a = render_voxel_grid(f, DESK_ROI, 0.8).occupancy
        b = render_voxel_grid(g, DESK_ROI, 0.8).occupancy
        assert np.all(b[a])

    def test_mask_does_not_change_scores(self):
        f = lambda p: 0.5 + 0.5 * np.sin(3 * p[:, 0])  # noqa: E731
        full = voxel_scores(f, DESK_ROI, 0.8)
        mask = np.zeros(full.shape, bool)
        mask[::3, 1::2] = True
        part = voxel_scores(f, DESK_ROI, 0.8, mask=mask)
        np.testing.assert_array_equal(part[mask], full[mask])
        assert np.all(part[~mask] == 0)

    def test_reproducible(self):
        f = lambda p: 0.5 + 0.5 * np.sin(3 * p[:, 1])  # noqa: E731
        a = voxel_scores(f, DESK_ROI, 0.8, VoxelRenderConfig(seed=2))
        b = voxel_scores(f, DESK_ROI, 0.8, VoxelRenderConfig(seed=2))
        assert np.array_equal(a, b)

    def test_bad_threshold(self):
        with pytest.raises(ConfigError):
            VoxelRenderConfig(threshold=1.0)
