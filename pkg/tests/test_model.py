import dataclasses

import numpy as np
import pytest

from _gradcases import model_gradcheck
from bevocc.diffcore import Tensor
from bevocc.errors import ConfigError, FormatError, OutOfRoiError
from bevocc.geometry import DESK_ROI
from bevocc.model import (
    ModelConfig,
    OccupancyNet,
    argmax_camera_map,
    decode_checkpoint,
    encode_checkpoint,
    freeze,
)
from bevocc.simulator import RenderedViews


@pytest.fixture(scope="module")
def tiny():
    return OccupancyNet(ModelConfig.tiny())


def random_views(rng, cfg, batch=1):
    return rng.random((batch, cfg.num_cameras, 2, cfg.image_size, cfg.image_size))


def random_points(rng, n):
    return rng.uniform(DESK_ROI.lo, DESK_ROI.hi, size=(n, 3))


class TestEncoder:
    def test_token_counts(self):
        cfg = ModelConfig(image_size=64, encoder_width=16, heads=2, bev_channels=8,
                          encoder_depth=4, tapped_layers=(1, 2, 3, 4))
        net = OccupancyNet(cfg)
        toks = net.encode_views(np.zeros((1, 4, 2, 64, 64)))
        assert len(toks) == 4
        assert all(t.shape == (1, 4, 64, 16) for t in toks)

    def test_cameras_encoded_independently(self, tiny):
        rng = np.random.default_rng(0)
        v = random_views(rng, tiny.config)
        a = tiny.encode_views(v)
        b = tiny.encode_views(v[:, ::-1])
        for ta, tb in zip(a, b):
            np.testing.assert_allclose(ta.data[:, ::-1], tb.data, rtol=0, atol=1e-12)

    def test_wrong_raster_rejected(self, tiny):
        with pytest.raises(ConfigError):
            tiny.encode_views(np.zeros((1, 2, 2, 24, 24)))


class TestProjector:
    def test_shape_independent_of_camera_count(self):
        for ncam in (1, 3):
            cfg = ModelConfig.tiny(num_cameras=ncam)
            net = OccupancyNet(cfg)
            tok = net.encode_views(np.zeros((2, ncam, 2, 16, 16)))
            out = net.project_to_bev(tok[0], 0)
            assert out.shape == (2, cfg.bev_side, cfg.bev_side, cfg.bev_channels)

    @pytest.mark.parametrize("variant,n", [("ca", 1), ("ca_ca", 2), ("ca_sa_ca", 2)])
    def test_attention_rows_are_distributions(self, variant, n):
        cfg = ModelConfig.tiny(projector=variant)
        net = OccupancyNet(cfg)
        rec = []
        net.bev_grid(random_views(np.random.default_rng(1), cfg), rec)
        assert len(rec) == n * len(cfg.tapped_layers)
        for r in rec:
            np.testing.assert_allclose(r.weights.sum(-1), 1.0, atol=1e-6)
            np.testing.assert_allclose(r.camera_mass().sum(-1), 1.0, atol=1e-6)
        amap = argmax_camera_map(rec, cfg.bev_side)
        assert amap.shape == (cfg.bev_side, cfg.bev_side)
        assert set(np.unique(amap)) <= {0, 1}

    def test_views_carry_no_calibration(self):
        assert {f.name for f in dataclasses.fields(RenderedViews)} == {"data", "camera_ids"}


class TestFusion:
    def test_stage_counts(self):
        assert ModelConfig().upsample_stages == 2
        paper = ModelConfig.paper()
        assert paper.upsample_stages == 3 and paper.fused_channels == 256

    def test_bad_resolution(self):
        with pytest.raises(ConfigError):
            ModelConfig(bev_side=16, fused_resolution=48)

    def test_constant_maps_give_constant_interior(self):
        cfg = ModelConfig.tiny(bev_side=4, fused_resolution=16)
        net = OccupancyNet(cfg)
        maps = [Tensor(np.full((1, 4, 4, cfg.bev_channels), 0.3)) for _ in cfg.tapped_layers]
        out, pre = net.fuse_and_upsample(maps, return_pre_projection=True)
        assert out.shape == (1, 16, 16, cfg.fused_channels)
        # zero padding reaches 2**stages - 1 cells in from the border
        k = 2 ** cfg.upsample_stages - 1
        interior = pre.data[0, k:-k, k:-k]
        np.testing.assert_allclose(interior, np.broadcast_to(interior[0, 0], interior.shape),
                                   rtol=0, atol=1e-12)

    def test_wrong_map_count(self, tiny):
        with pytest.raises(ConfigError):
            tiny.fuse_and_upsample([Tensor(np.zeros((1, 4, 4, 8)))])


class TestDecoder:
    def test_probabilities_in_open_interval(self, tiny):
        rng = np.random.default_rng(2)
        field = freeze(tiny, random_views(rng, tiny.config))
        p = field(random_points(rng, 500))
        assert p.shape == (500,) and np.all((p > 0) & (p < 1))

    def test_pointwise_permutation(self, tiny):
        rng = np.random.default_rng(3)
        field = freeze(tiny, random_views(rng, tiny.config))
        pts = random_points(rng, 64)
        perm = rng.permutation(64)
        np.testing.assert_allclose(field(pts[perm]), field(pts)[perm], rtol=0, atol=1e-15)

    def test_z_changes_output(self, tiny):
        field = freeze(tiny, random_views(np.random.default_rng(4), tiny.config))
        p = field(np.array([[1.0, 2.0, 0.0], [1.0, 2.0, 4.0]]))
        assert p[0] != p[1]

    def test_out_of_roi(self, tiny):
        field = freeze(tiny, random_views(np.random.default_rng(5), tiny.config))
        with pytest.raises(OutOfRoiError):
            field(np.array([[0.0, 0.0, 10.0]]))


class TestFrozenField:
    def test_cache_reused(self):
        net = OccupancyNet(ModelConfig.tiny())
        rng = np.random.default_rng(6)
        field = freeze(net, random_views(rng, net.config))
        calls = net.encoder_calls
        pts = random_points(rng, 1_000_000)
        a = field(pts[:10])
        field(pts)
        assert net.encoder_calls == calls == 1
        np.testing.assert_array_equal(field(pts[:10]), a)

    def test_checkpoint_roundtrip_bit_exact(self, tiny):
        rng = np.random.default_rng(7)
        views = random_views(rng, tiny.config)
        probe = random_points(rng, 256)
        back, extra = decode_checkpoint(encode_checkpoint(tiny, {"step": 3}))
        assert extra == {"step": 3}
        assert back.config == tiny.config
        np.testing.assert_array_equal(freeze(back, views)(probe), freeze(tiny, views)(probe))

    def test_corrupt_checkpoint(self, tiny):
        buf = encode_checkpoint(tiny)
        with pytest.raises(FormatError):
            decode_checkpoint(buf[:-8])
        with pytest.raises(FormatError):
            decode_checkpoint(b"NOPE" + buf[4:])


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(tapped_layers=(0, 1)), dict(tapped_layers=(7,)),
                                    dict(bev_side=12), dict(projector="sa"),
                                    dict(image_size=30)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ModelConfig(**kw)

    def test_dict_roundtrip(self):
        cfg = ModelConfig.tiny(projector="ca_sa_ca")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"depth": 3})

    def test_same_seed_same_weights(self):
        a = OccupancyNet(ModelConfig.tiny(seed=3)).named_parameters()
        b = OccupancyNet(ModelConfig.tiny(seed=3)).named_parameters()
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)


@pytest.mark.parametrize("seed", range(10))
def test_end_to_end_gradients(seed):
    assert model_gradcheck(seed) < 1e-3
