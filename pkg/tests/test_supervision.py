import numpy as np
import pytest

from bevocc.errors import ConfigError, ContractError, UnsatisfiableSamplingError
from bevocc.geometry import DESK_ROI, Ray, RayBatch
from bevocc.simulator import generate_scene
from bevocc.supervision import (
    KIND_FREE,
    KIND_POSITIVE,
    KIND_SYMMETRIC,
    LabeledQuerySet,
    SamplingConfig,
    decode_lqry,
    encode_lqry,
    sample_queries,
    scene_queries,
    validate_against_oracle,
)

RAY10 = [Ray((0.0, 0.0, 1.0), (1.0, 0.0, 0.0), 10.0)]


def cfg(**kw):
    base = dict(positives=500, negatives=500, symmetric=100, seed=0)
    base.update(kw)
    return SamplingConfig(**base)


class TestIntervals:
    def test_stratified_bins(self):
        qs = sample_queries(RAY10, cfg(strategy="stratified", negatives=500))
        free = qs.kind == KIND_FREE
        for g in np.unique(qs.group[free]):
            t = qs.t[free & (qs.group == g)]
            assert sorted(np.floor(t / 2.0).astype(int)) == [0, 1, 2, 3, 4]

    def test_positive_and_symmetric_intervals(self):
        qs = sample_queries(RAY10, cfg())
        tp = qs.t[qs.kind == KIND_POSITIVE]
        ts = qs.t[qs.kind == KIND_SYMMETRIC]
        assert len(ts) == 100
        assert np.all((tp >= 10.0) & (tp < 10.1))
        assert np.all((ts >= 9.9) & (ts < 10.0))

    def test_random_interval(self):
        qs = sample_queries(RAY10, cfg(strategy="random"))
        tf = qs.t[~qs.labels]
        assert np.all((tf >= 0) & (tf < 10.0))
        assert tf.std() > 2.0

    def test_points_follow_rays(self):
        qs = sample_queries(RAY10, cfg())
        np.testing.assert_allclose(qs.points[:, 0], qs.t)
        np.testing.assert_array_equal(qs.points[:, 1:], np.broadcast_to([0.0, 1.0], (1000, 2)))

    def test_paper_preset_counts(self):
        c = SamplingConfig.paper()
        assert (c.positives, c.negatives - c.symmetric, c.symmetric) == (150_000, 120_000, 30_000)


class TestBalanceAndRoi:
    @pytest.mark.parametrize("strategy", ["random", "stratified", "stratified_symmetric"])
    def test_balance(self, strategy):
        qs = scene_queries(generate_scene(0), cfg(strategy=strategy))
        assert qs.num_positive == qs.num_negative == 500
        assert DESK_ROI.contains(qs.points).all()

    def test_out_of_roi_rays_resampled(self):
        rays = RAY10 + [Ray((0.0, 0.0, 1.0), (1.0, 0.0, 0.0), 40.0)]
        qs = sample_queries(rays, cfg(strategy="random"))
        assert DESK_ROI.contains(qs.points).all()
        assert qs.num_positive == 500
        assert set(qs.ray_index[qs.labels]) == {0}

    def test_unsatisfiable(self):
        with pytest.raises(UnsatisfiableSamplingError):
            sample_queries([Ray((0.0, 0.0, 1.0), (1.0, 0.0, 0.0), 40.0)], cfg())

    def test_short_rays_skipped_for_symmetric(self):
        rays = RAY10 + [Ray((0.0, 0.0, 1.0), (0.0, 0.0, -1.0), 0.05)]
        qs = sample_queries(rays, cfg())
        assert qs.skipped_symmetric == 1
        assert np.all(qs.ray_index[qs.kind == KIND_SYMMETRIC] == 0)

    def test_no_return_rays_ignored(self):
        b = RayBatch(np.zeros((2, 3)) + [0, 0, 1], [[1, 0, 0], [0, 1, 0]], [10.0, np.nan])
        qs = sample_queries(b, cfg())
        assert np.all(qs.ray_index == 0)

    def test_no_rays(self):
        with pytest.raises(ContractError):
            sample_queries([], cfg())


class TestOracle:
    @pytest.mark.parametrize("seed", range(5))
    def test_negatives_always_free(self, seed):
        s = generate_scene(seed)
        qs = scene_queries(s, SamplingConfig(seed=seed))
        agree = validate_against_oracle(qs, s)
        assert agree.negative == 1.0
        assert agree.positive >= 0.95

    def test_empty(self):
        empty = LabeledQuerySet(np.zeros((0, 3)), [], [])
        assert validate_against_oracle(empty, generate_scene(0)).overall == 1.0


class TestConfig:
    def test_deterministic(self):
        a = scene_queries(generate_scene(1), cfg(seed=4))
        b = scene_queries(generate_scene(1), cfg(seed=4))
        assert np.array_equal(a.points, b.points)
        c = scene_queries(generate_scene(1), cfg(seed=5))
        assert not np.array_equal(a.points, c.points)

    @pytest.mark.parametrize("kw", [dict(bins=0), dict(tau=0.0), dict(symmetric=600),
                                    dict(positives=0), dict(strategy="uniform")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            cfg(**kw)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            SamplingConfig.from_dict({"bins": 5, "jitter": 1})

    def test_with_counts_keeps_ratio(self):
        c = SamplingConfig().with_counts(512)
        assert (c.positives, c.negatives, c.symmetric) == (512, 512, 102)


def test_lqry_roundtrip():
    qs = scene_queries(generate_scene(2), cfg())
    back = decode_lqry(encode_lqry(qs))
    np.testing.assert_array_equal(back.points, qs.points.astype(np.float32))
    np.testing.assert_array_equal(back.labels, qs.labels)
    np.testing.assert_array_equal(back.ray_index, qs.ray_index)
    assert len(encode_lqry(qs)) == 16 + len(qs) * 17
