import math

import numpy as np
import pytest

from bevocc.errors import ConfigError, ContractError, TrainingDivergedError
from bevocc.model import ModelConfig, OccupancyNet, decode_checkpoint
from bevocc.simulator import default_rig, generate_scene
from bevocc.supervision import SamplingConfig
from bevocc.training import (
    SceneCache,
    TrainConfig,
    _batch_loss,
    bce_loss,
    train,
)

TINY = ModelConfig.tiny()


def tiny_scenes(n=2):
    rig = default_rig(image_size=16, num_cameras=2)
    return [generate_scene(s, cameras=rig) for s in range(n)]


def short(**kw):
    base = dict(iterations=6, warmup=2, batch_size=2, queries_per_scene=64)
    base.update(kw)
    return TrainConfig(**base)


class TestLoss:
    def test_uninformative(self):
        assert bce_loss([0.5, 0.5], [1, 0]) == pytest.approx(math.log(2), rel=1e-12)

    def test_confident_and_right(self):
        p = 1 / (1 + np.exp(-np.array([20.0, -20.0])))
        assert bce_loss(p, [1, 0]) < 1e-6

    def test_confident_and_wrong(self):
        assert bce_loss([0.9], [0]) == pytest.approx(-math.log(0.1), rel=1e-9)

    def test_empty(self):
        with pytest.raises(ContractError):
            bce_loss([], [])


class TestConfig:
    def test_warmup_below_iterations(self):
        with pytest.raises(ConfigError):
            TrainConfig(iterations=10, warmup=10)

    def test_odd_queries(self):
        with pytest.raises(ConfigError):
            TrainConfig(queries_per_scene=101)

    def test_balanced_step_sampling(self):
        sc = TrainConfig().step_sampling(3, 1)
        assert sc.positives == sc.negatives == 512
        assert sc.strategy == "stratified_symmetric"
        assert sc.seed != TrainConfig().step_sampling(3, 0).seed

    def test_dict_roundtrip(self):
        cfg = short(sampling=SamplingConfig(strategy="random"))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"epochs": 3})


class TestLoop:
    def test_initial_loss_near_ln2(self):
        scene = generate_scene(0)
        net = OccupancyNet(ModelConfig())
        loss = _batch_loss(net, SceneCache([scene]), [0], [TrainConfig().step_sampling(0, 0)])
        assert abs(loss.item() - math.log(2)) < 0.15

    def test_deterministic_checkpoints(self, tmp_path):
        scenes = tiny_scenes()
        train(scenes, short(), TINY, out_dir=tmp_path / "a")
        train(scenes, short(), TINY, out_dir=tmp_path / "b")
        a = (tmp_path / "a" / "final.vgtc").read_bytes()
        b = (tmp_path / "b" / "final.vgtc").read_bytes()
        assert a == b
        assert (tmp_path / "a" / "history.csv").read_text() == \
            (tmp_path / "b" / "history.csv").read_text()

    def test_outputs(self, tmp_path):
        res = train(tiny_scenes(1), short(checkpoint_every=3), TINY, out_dir=tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["final.vgtc", "history.csv", "step_000003.vgtc", "step_000006.vgtc"]
        lines = (tmp_path / "history.csv").read_text().splitlines()
        assert lines[0] == "step,loss,lr,grad_norm" and len(lines) == 7
        assert res.history[0].lr == 0.0
        net, extra = decode_checkpoint((tmp_path / "final.vgtc").read_bytes())
        assert extra == {"step": 6}

    def test_divergence_reports_step_and_checkpoint(self, tmp_path):
        net = OccupancyNet(TINY)
        net.dec_out.bias.data[:] = np.nan
        with pytest.raises(TrainingDivergedError) as exc:
            train(tiny_scenes(1), short(), TINY, out_dir=tmp_path, net=net)
        assert exc.value.step == 0
        assert exc.value.checkpoint.exists()

    def test_loss_goes_down(self):
        res = train(tiny_scenes(1), short(iterations=60, warmup=5, peak_lr=3e-3), TINY)
        first = np.mean([r.loss for r in res.history[:10]])
        assert res.final_loss(10) < first
