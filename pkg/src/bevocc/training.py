"""Optimization loop for the occupancy network.

Every step draws ``batch_size`` scenes round-robin, samples a fresh balanced
query set along each scene's LiDAR rays, and takes one clipped AdamW step on
the mean binary cross-entropy. Per-step sampling seeds are derived from
``(seed, step, slot)`` so a run is reproducible from its config alone.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np

from .diffcore import AdamW, OptimizerConfig, Tensor, backward, no_grad
from .diffcore import functional as F
from .errors import ConfigError, ContractError, TrainingDivergedError
from .geometry import rays_from_cloud
from .model import ModelConfig, OccupancyNet, save_checkpoint
from .simulator import SceneSpec, render_views, simulate_lidar
from .supervision import SamplingConfig, sample_queries


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    warmup: int = 100
    peak_lr: float = 1e-3
    batch_size: int = 2
    queries_per_scene: int = 1024
    seed: int = 0
    checkpoint_every: int = 0
    clip_norm: float = 1.0
    weight_decay: float = 0.01
    sampling: SamplingConfig = field(default_factory=SamplingConfig)

    def __post_init__(self):
        if isinstance(self.sampling, dict):
            object.__setattr__(self, "sampling", SamplingConfig.from_dict(self.sampling))
        for name in ("iterations", "batch_size", "queries_per_scene"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.queries_per_scene % 2:
            raise ConfigError("queries_per_scene must be even (balanced labels)")
        if not 0 <= self.warmup < self.iterations:
            raise ConfigError(f"warmup {self.warmup} must lie in [0, iterations)")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if not self.peak_lr > 0:
            raise ConfigError("peak_lr must be positive")

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(peak_lr=self.peak_lr, warmup_steps=self.warmup,
                               total_steps=self.iterations, clip_norm=self.clip_norm,
                               weight_decay=self.weight_decay)

    def step_sampling(self, step: int, slot: int) -> SamplingConfig:
        seed = int(np.random.SeedSequence([self.seed, step, slot]).generate_state(1)[0])
        return self.sampling.with_counts(self.queries_per_scene // 2, seed=seed)

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampling"] = self.sampling.to_dict()
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        """Full-scale schedule: 200K iterations, 10K warmup, peak lr 5e-5, batch 6."""
        base = dict(iterations=200_000, warmup=10_000, peak_lr=5e-5, batch_size=6,
                    queries_per_scene=300_000, sampling=SamplingConfig.paper())
        base.update(kw)
        return cls(**base)


class StepRecord(NamedTuple):
    step: int
    loss: float
    lr: float
    grad_norm: float


@dataclass
class TrainResult:
    net: OccupancyNet
    history: List[StepRecord]
    checkpoints: List[Path]
    seconds: float

    def final_loss(self, window: int = 50) -> float:
        """Mean loss of the last ``window`` steps."""
        return float(np.mean([r.loss for r in self.history[-window:]]))


def bce_loss(probs, labels) -> float:
    """Mean binary cross-entropy of probabilities, evaluated through logits."""
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ContractError("bce_loss needs at least one prediction")
    if np.any((p <= 0) | (p >= 1)):
        raise ContractError("probabilities must lie strictly inside (0, 1)")
    logits = np.log(p) - np.log1p(-p)
    return F.bce(Tensor(logits), y).item()


class SceneCache:
    """Rendered views and LiDAR rays per scene, computed once."""

    def __init__(self, scenes: Sequence[SceneSpec]):
        if not scenes:
            raise ContractError("training needs at least one scene")
        self.scenes = list(scenes)
        self.views = [render_views(s).data for s in self.scenes]
        self.rays = [rays_from_cloud(simulate_lidar(s)) for s in self.scenes]

    def __len__(self) -> int:
        return len(self.scenes)


def _batch_loss(net, cache: SceneCache, idx: Sequence[int], samplings: Sequence[SamplingConfig]):
    """Loss over a batch; repeated scenes share one encoder pass."""
    unique = list(dict.fromkeys(idx))
    pts = {i: [] for i in unique}
    lab = {i: [] for i in unique}
    for i, sc in zip(idx, samplings):
        qs = sample_queries(cache.rays[i], sc, cache.scenes[i].roi)
        pts[i].append(qs.points)
        lab[i].append(qs.labels)
    views = np.stack([cache.views[i] for i in unique])
    logits = net.forward(views, [np.concatenate(pts[i]) for i in unique])
    labels = np.concatenate([np.concatenate(lab[i]) for i in unique]).astype(np.float64)
    return F.bce(logits, labels)


def write_history(path, history: Sequence[StepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(StepRecord._fields)
        for r in history:
            w.writerow([r.step, repr(r.loss), repr(r.lr), repr(r.grad_norm)])


def train(scenes: Sequence[SceneSpec], cfg: TrainConfig, model_cfg: ModelConfig,
          out_dir=None, net: Optional[OccupancyNet] = None,
          on_step: Optional[Callable[[StepRecord], None]] = None) -> TrainResult:
    """Train from scratch (or continue ``net``) and return the trained network.

    With ``out_dir`` set, writes ``history.csv``, periodic ``step_XXXXXX.vgtc``
    checkpoints and ``final.vgtc``.
    """
    cache = scenes if isinstance(scenes, SceneCache) else SceneCache(scenes)
    net = OccupancyNet(model_cfg) if net is None else net
    opt = AdamW(net.named_parameters(), cfg.optimizer())
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history: List[StepRecord] = []
    ckpts: List[Path] = []
    start = time.perf_counter()
    n = len(cache)
    for step in range(cfg.iterations):
        idx = [(step * cfg.batch_size + j) % n for j in range(cfg.batch_size)]
        samplings = [cfg.step_sampling(step, j) for j in range(cfg.batch_size)]
        loss = _batch_loss(net, cache, idx, samplings)
        value = loss.item()
        try:
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss {value}")
            backward(loss)
            info = opt.step()
        except TrainingDivergedError as err:
            last = None
            if out is not None:
                # parameters are untouched by the failed step
                last = out / "last_good.vgtc"
                save_checkpoint(last, net, {"step": step})
            raise TrainingDivergedError(f"training diverged at step {step}: {err}", step=step,
                                        param=err.param, checkpoint=last) from err
        rec = StepRecord(step, value, info.lr, info.grad_norm)
        history.append(rec)
        if on_step is not None:
            on_step(rec)
        done = step + 1
        if out is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            path = out / f"step_{done:06d}.vgtc"
            save_checkpoint(path, net, {"step": done})
            ckpts.append(path)
    if out is not None:
        write_history(out / "history.csv", history)
        path = out / "final.vgtc"
        save_checkpoint(path, net, {"step": cfg.iterations})
        ckpts.append(path)
    return TrainResult(net, history, ckpts, time.perf_counter() - start)


def evaluate_loss(net: OccupancyNet, scene: SceneSpec, sampling: SamplingConfig) -> float:
    """Mean BCE of the network on a fresh query sample from ``scene``."""
    cache = SceneCache([scene])
    with no_grad():
        return _batch_loss(net, cache, [0], [sampling]).item()
