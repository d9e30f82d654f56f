import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevocc.errors import ContractError, DegenerateRayError, FormatError, OutOfRoiError
from bevocc.geometry import (
    DESK_ROI,
    PAPER_ROI,
    PointCloud,
    Ray,
    RayBatch,
    RoiBox,
    VoxelGrid,
    clip_ray_to_roi,
    clip_rays_to_roi,
    decode_lpcd,
    decode_voxg,
    denormalize_point,
    encode_lpcd,
    encode_voxg,
    grid_dims,
    normalize_point,
    rays_from_cloud,
)


class TestRaysFromCloud:
    def test_axis_aligned(self):
        rays = rays_from_cloud(PointCloud([[3.0, 0, 0]], [0, 0, 0]))
        r = rays[0]
        assert r.direction == (1.0, 0.0, 0.0)
        assert r.hit_distance == 3.0

    def test_degenerate(self):
        with pytest.raises(DegenerateRayError) as exc:
            rays_from_cloud(PointCloud([[1.0, 0, 2], [0, 0, 2]], [0, 0, 2]))
        assert exc.value.indices == [1]

    def test_345(self):
        r = rays_from_cloud(PointCloud([[4.0, 5.0, 0.0]], [1, 1, 0]))[0]
        assert r.hit_distance == pytest.approx(5.0, abs=1e-12)
        np.testing.assert_allclose(r.direction, [0.6, 0.8, 0.0], atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            rays_from_cloud(PointCloud(np.zeros((0, 3))))

    def test_roundtrip_reproduces_points(self):
        rng = np.random.default_rng(0)
        origin = rng.normal(size=3)
        pts = rng.uniform(-30, 30, size=(1000, 3))
        rays = rays_from_cloud(PointCloud(pts, origin))
        np.testing.assert_allclose(rays.points(), pts, atol=1e-9, rtol=0)


class TestNormalize:
    def test_center(self):
        np.testing.assert_allclose(normalize_point(PAPER_ROI.center, PAPER_ROI), 0.0, atol=1e-15)

    def test_max_corner(self):
        np.testing.assert_array_equal(normalize_point(PAPER_ROI.max, PAPER_ROI), [1, 1, 1])

    def test_floor(self):
        np.testing.assert_allclose(normalize_point([0, 0, -1.0], PAPER_ROI), [0, 0, -1])

    def test_outside(self):
        with pytest.raises(OutOfRoiError):
            normalize_point([0, 0, 6.0], PAPER_ROI)

    @settings(max_examples=200, deadline=None)
    @given(st.tuples(*[st.floats(0, 1)] * 3))
    def test_roundtrip(self, frac):
        p = PAPER_ROI.lo + np.array(frac) * PAPER_ROI.extent
        q = normalize_point(p, PAPER_ROI)
        assert np.all(np.abs(q) <= 1.0)
        np.testing.assert_allclose(denormalize_point(q, PAPER_ROI), p, atol=1e-9, rtol=0)


class TestClip:
    def test_from_center(self):
        assert clip_ray_to_roi(Ray(PAPER_ROI.center, (1, 0, 0)), PAPER_ROI) == (0.0, 40.0)

    def test_parallel_outside(self):
        assert clip_ray_to_roi(Ray((0, 0, 10.0), (1, 0, 0)), PAPER_ROI) is None

    def test_slab_arithmetic(self):
        assert clip_ray_to_roi(Ray((-50, 0, 1), (1, 0, 0)), PAPER_ROI) == (10.0, 90.0)

    def test_boundary_points(self):
        rng = np.random.default_rng(1)
        o = rng.uniform(-100, 100, size=(5000, 3))
        d = rng.normal(size=(5000, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        te, tx, hit = clip_rays_to_roi(o, d, PAPER_ROI)
        outside = ~PAPER_ROI.contains(o, 0.0)
        assert hit.sum() > 100

        def on_boundary(p):
            lo, hi = PAPER_ROI.lo, PAPER_ROI.hi
            inside = np.all((p >= lo - 1e-9) & (p <= hi + 1e-9), axis=1)
            face = np.any(np.isclose(p, lo, atol=1e-9, rtol=0) | np.isclose(p, hi, atol=1e-9,
                                                                             rtol=0), axis=1)
            return inside & face

        sel = hit & outside
        assert np.all(on_boundary(o[sel] + te[sel, None] * d[sel]))
        assert np.all(on_boundary(o[hit] + tx[hit, None] * d[hit]))


class TestTypes:
    def test_roi_order(self):
        with pytest.raises(ContractError):
            RoiBox((0, 0, 0), (1, -1, 1))

    def test_ray_unit(self):
        with pytest.raises(ContractError):
            Ray((0, 0, 0), (1, 1, 0))

    def test_ray_positive_distance(self):
        with pytest.raises(ContractError):
            Ray((0, 0, 0), (1, 0, 0), 0.0)

    def test_paper_grid_dims(self):
        assert grid_dims(PAPER_ROI, 0.4) == (200, 200, 16)
        assert grid_dims(DESK_ROI, 0.4) == (80, 80, 16)

    def test_batch_iteration(self):
        b = RayBatch(np.zeros((2, 3)), [[1, 0, 0], [0, 1, 0]], [1.0, np.nan])
        rays = list(b)
        assert rays[0].hit_distance == 1.0 and rays[1].hit_distance is None
        assert RayBatch.from_rays(rays).hit_distance[0] == 1.0


class TestFormats:
    def test_lpcd_roundtrip(self):
        rng = np.random.default_rng(2)
        c = PointCloud(rng.uniform(-10, 10, (50, 3)).astype(np.float32), [0, 0, 1.5])
        back = decode_lpcd(encode_lpcd(c))
        np.testing.assert_array_equal(back.points, c.points)
        np.testing.assert_array_equal(back.sensor_origin, c.sensor_origin)

    def test_lpcd_layout(self):
        buf = encode_lpcd(PointCloud([[1, 2, 3]], [0, 0, 0]))
        assert buf[:4] == b"LPCD" and len(buf) == 4 + 4 + 12 + 8 + 12

    def test_lpcd_bad_magic(self):
        with pytest.raises(FormatError):
            decode_lpcd(b"XXXX" + bytes(40))

    @pytest.mark.parametrize("with_vis", [False, True])
    def test_voxg_roundtrip(self, with_vis):
        rng = np.random.default_rng(3)
        occ = rng.random((80, 80, 16)) > 0.7
        vis = rng.random((80, 80, 16)) > 0.5 if with_vis else None
        g = VoxelGrid(DESK_ROI, 0.4, occ, vis)
        back = decode_voxg(encode_voxg(g))
        assert back.dims == g.dims
        np.testing.assert_array_equal(back.occupancy, occ)
        if with_vis:
            np.testing.assert_array_equal(back.visibility, vis)
        else:
            assert back.visibility is None
        np.testing.assert_allclose(back.roi.min, DESK_ROI.min, rtol=1e-6)
