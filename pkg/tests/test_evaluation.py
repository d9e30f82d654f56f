from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevocc.errors import ContractError, EmptyMetricError, FormatError, IncompleteTableError
from bevocc.geometry import DESK_ROI, PointCloud, RoiBox, VoxelGrid, clip_rays_to_roi
from bevocc.evaluation import (
    RankTable,
    absrel,
    absrel_counts,
    average_rank,
    bundled_table2,
    camera_sectors,
    chamfer,
    eval_pointmap,
    lidar_rays,
    load_rank_table,
    nearest_distances,
    occupancy_scores,
    parse_rank_table,
    scores_from_confusion,
    visibility_mask,
    voxelize_scene,
    walk_voxels,
)
from bevocc.rendering import oracle_field
from bevocc.simulator import Box, Camera, SceneSpec, default_rig, generate_scene

ROOT = Path(__file__).resolve().parents[1]


class TestAbsRel:
    def test_identity(self):
        assert absrel([1.0, 5.0], [1.0, 5.0]) == 0.0

    def test_formula(self):
        assert absrel([9.0], [10.0]) == pytest.approx(0.1)

    def test_exclusion(self):
        r = absrel_counts([9.0, 3.0, 1.0], [10.0, 0.0, -1.0])
        assert r == (pytest.approx(0.1), 1, 2)

    def test_all_excluded(self):
        with pytest.raises(EmptyMetricError):
            absrel([1.0], [0.0])


class TestChamfer:
    def test_identical(self):
        pts = np.random.default_rng(0).normal(size=(50, 3))
        assert chamfer(pts, pts) == 0.0

    def test_single_pair(self):
        assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == 1.0

    def test_empty(self):
        with pytest.raises(ContractError):
            chamfer(np.zeros((0, 3)), [[1, 0, 0]])

    def test_kdtree_equals_brute_force(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            a = rng.uniform(-10, 10, (200, 3))
            b = rng.uniform(-10, 10, (200, 3))
            assert chamfer(a, b, "kdtree") == chamfer(a, b, "brute")
            assert np.array_equal(nearest_distances(a, b, "kdtree"),
                                  nearest_distances(a, b, "brute"))

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(30, 3)), rng.normal(size=(70, 3))
        assert chamfer(a, b) == chamfer(b, a)

    def test_accepts_point_clouds(self):
        assert chamfer(PointCloud([[0, 0, 0]]), PointCloud([[0, 3, 4]])) == 5.0


def grid(occ, vis=None):
    occ = np.asarray(occ, bool)
    roi = RoiBox((0, 0, 0), tuple(0.4 * np.array(occ.shape)))
    return VoxelGrid(roi, 0.4, occ, np.ones_like(occ) if vis is None else vis)


class TestOccupancyScores:
    def test_perfect(self):
        occ = np.random.default_rng(0).random((5, 5, 2)) > 0.5
        s = occupancy_scores(grid(occ), grid(occ))
        assert (s.f1, s.iou) == (1.0, 1.0)

    def test_half_recall(self):
        gt = np.zeros((4, 4, 1), bool)
        gt[:2] = True
        pred = np.zeros_like(gt)
        pred[0] = True
        s = occupancy_scores(grid(pred), grid(gt))
        assert s.iou == 0.5 and s.f1 == pytest.approx(2 / 3)

    def test_only_visible_counted(self):
        gt = np.ones((2, 2, 1), bool)
        vis = np.zeros_like(gt)
        vis[0, 0] = True
        pred = np.zeros_like(gt)
        pred[0, 0] = True
        assert occupancy_scores(grid(pred), grid(gt, vis)).iou == 1.0

    def test_dim_mismatch(self):
        with pytest.raises(ContractError):
            occupancy_scores(grid(np.zeros((2, 2, 2))), grid(np.zeros((2, 2, 3))))

    def test_nothing_visible(self):
        occ = np.zeros((2, 2, 2), bool)
        with pytest.raises(EmptyMetricError):
            occupancy_scores(grid(occ), grid(occ, np.zeros_like(occ)))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000))
    def test_iou_never_exceeds_f1(self, tp, fp, fn):
        f1, iou = scores_from_confusion(tp, fp, fn)
        assert iou <= f1 + 1e-15
        assert 0.0 <= iou <= 1.0


def wall_scene():
    cam = Camera("front", (0.0, 0.0, 1.0), 0.0, 0.0, 8.0, 8.0, 8.0, 8.0, 16, 16)
    return SceneSpec((Box((6.0, 0.0, 2.0), (1.0, 30.0, 6.0)),), cameras=(cam,))


class TestVisibility:
    def test_wall_occludes(self):
        s = wall_scene()
        vis = visibility_mask(s, voxel_size=0.4)
        # hit point (5.5, 0, 1) lies in voxel (53, 40, 5); (8, 0, 1) is behind the wall
        assert vis[53, 40, 5]
        assert not vis[60, 40, 5]
        assert not vis[55:, 40, 5].any()

    def test_line_walk_matches_dense_sampling(self):
        rng = np.random.default_rng(0)
        roi = DESK_ROI
        o = rng.uniform(roi.lo, roi.hi, (300, 3))
        d = rng.normal(size=(300, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        stop = rng.uniform(0.5, 20.0, 300)
        walked = walk_voxels(o, d, stop, roi, 0.4)
        te, tx, hit = clip_rays_to_roi(o, d, roi)
        dense = np.zeros_like(walked)
        for i in range(300):
            t = np.linspace(te[i], min(stop[i], tx[i]), 4000)
            p = o[i] + t[:, None] * d[i]
            ijk = np.clip(np.floor((p - roi.lo) / 0.4).astype(int), 0, np.array(walked.shape) - 1)
            dense[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = True
        assert np.all(walked[dense])
        # every walked voxel is genuinely crossed by some ray segment
        for ijk in np.argwhere(walked & ~dense):
            lo = roi.lo + ijk * 0.4
            box = RoiBox(tuple(lo), tuple(lo + 0.4))
            a, b, h = clip_rays_to_roi(o, d, box)
            end = np.minimum(stop, tx)
            assert np.any(h & (a <= end + 1e-9) & (b >= te))

    def test_voxelize_box(self):
        s = SceneSpec((Box((0.2, 0.2, 0.4), (0.4, 0.4, 0.4)),), cameras=default_rig())
        occ = voxelize_scene(s, voxel_size=0.4)
        # the box coincides with voxel (40, 40, 3); faces touching neighbours add no volume
        assert occ.sum() == 1 and occ[40, 40, 3]


class TestRanking:
    def test_table2_reproduces_published_ranks(self):
        ranks = average_rank(bundled_table2())
        assert ranks["Ours"] == pytest.approx(1.8, abs=1e-12)
        published = {"VGGT": 3.9, "DUSt3R": 6.9, "Mast3R": 6.4, "Monst3R": 4.8,
                     "Stream3R": 4.0, "Cut3R": 3.5, "DA3": 6.4, "RenderOcc": 7.3}
        for m, v in published.items():
            assert ranks[m] == pytest.approx(v, abs=1e-12)

    def test_fixture_matches_bundled_copy(self):
        a = load_rank_table(ROOT / "fixtures" / "table2.csv")
        b = bundled_table2()
        assert a.methods == b.methods and np.array_equal(a.scores, b.scores)

    def test_single_method(self):
        t = RankTable(["a"], [("d", "m"), ("d", "n")], [[3.0, 4.0]], ["lower", "higher"])
        assert average_rank(t) == {"a": 1.0}

    def test_ties_share_min_rank(self):
        t = RankTable(["a", "b", "c"], [("d", "m")], [[1.0], [1.0], [2.0]], ["lower"])
        assert t.ranks()[:, 0].tolist() == [1, 1, 3]

    def test_higher_is_better(self):
        t = RankTable(["a", "b"], [("d", "iou")], [[0.2], [0.7]], ["higher"])
        assert average_rank(t) == {"a": 2.0, "b": 1.0}

    def test_missing_cell_named(self):
        t = RankTable(["a", "b"], [("d", "m")], [[1.0], [np.nan]], ["lower"])
        with pytest.raises(IncompleteTableError, match="b on d:m"):
            average_rank(t)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_invariant_under_monotone_transform(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.integers(0, 5, (6, 4)).astype(float) + 0.5
        t = RankTable(list("abcdef"), [("d", str(i)) for i in range(4)], s, ["lower"] * 4)
        u = RankTable(t.methods, t.columns, np.log(s) * 3 + 1, t.orientation)
        assert average_rank(t) == average_rank(u)

    def test_bad_csv(self):
        with pytest.raises(FormatError):
            parse_rank_table("method,a:b\nx,1\n")


class TestPointmap:
    def test_oracle_field_bounds(self):
        s = generate_scene(3)
        rays = lidar_rays(s)
        rep = eval_pointmap(oracle_field(s), s, rays)
        assert rep.values["chamfer"] <= 0.05
        assert rep.values["absrel"] <= 0.05 / rays.hit_distance.min()
        assert rep.counts["rays"] == len(rays)

    def test_aligned_baseline(self):
        s = generate_scene(4)
        rays = lidar_rays(s)
        rep = eval_pointmap(PointCloud(rays.points()), s, rays)
        assert rep.values["absrel"] == pytest.approx(0.0, abs=1e-15)
        assert rep.values["chamfer"] == 0.0
        assert '"chamfer": 0.0' in rep.to_json()

    def test_mismatched_rays(self):
        rays = lidar_rays(generate_scene(5))
        with pytest.raises(ContractError):
            eval_pointmap(oracle_field(generate_scene(6)), generate_scene(6), rays)
        with pytest.raises(ContractError):
            eval_pointmap(PointCloud(rays.points()[:10]), generate_scene(5), rays)

    def test_camera_sectors(self):
        rig = default_rig()
        d = np.array([[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]], float)
        assert camera_sectors(d, rig).tolist() == [0, 1, 2, 3]
