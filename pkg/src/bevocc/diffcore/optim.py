"""AdamW with global-norm clipping and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, NamedTuple

import numpy as np

from ..errors import ConfigError, TrainingDivergedError
from .tensor import Tensor


def cosine_lr(step: int, peak_lr: float, warmup_steps: int, total_steps: int,
              floor: float = 0.0) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to ``floor``.

    ``step`` counts completed updates, so the very first update uses lr 0
    whenever warmup is enabled.
    """
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    if step >= total_steps:
        return floor
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return floor + (peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.dot(p.grad.ravel(), p.grad.ravel()))
    return math.sqrt(total)


def clip_grad_norm(params, max_norm: float) -> tuple:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns ``(pre_clip_norm, scale)``; ``scale`` is 1.0 when no clipping happened.
    """
    params = list(params)
    norm = global_grad_norm(params)
    if norm > max_norm:
        s = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= s
        return norm, s
    return norm, 1.0


@dataclass
class OptimizerConfig:
    peak_lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 100
    total_steps: int = 2000
    clip_norm: float = 1.0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.peak_lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("optimizer: peak_lr, weight_decay must be >= 0 and eps > 0")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"optimizer.betas must be two values in [0, 1), got {self.betas}")
        if self.warmup_steps < 0 or self.total_steps <= 0:
            raise ConfigError("optimizer: warmup_steps >= 0 and total_steps > 0 required")
        if self.clip_norm <= 0:
            raise ConfigError("optimizer.clip_norm must be positive")


class StepInfo(NamedTuple):
    step: int
    lr: float
    grad_norm: float
    clip_scale: float


@dataclass
class OptimizerState:
    config: OptimizerConfig
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class AdamW:
    """Adam with decoupled weight decay over a name -> Tensor mapping."""

    def __init__(self, params: Mapping[str, Tensor], config: OptimizerConfig | None = None):
        self.params = dict(params)
        self.state = OptimizerState(config or OptimizerConfig())
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    @property
    def config(self) -> OptimizerConfig:
        return self.state.config

    def lr(self) -> float:
        c = self.config
        return cosine_lr(self.state.step, c.peak_lr, c.warmup_steps, c.total_steps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.grad.fill(0.0)

    def step(self) -> StepInfo:
        c = self.config
        for name, p in self.params.items():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            elif not np.all(np.isfinite(p.grad)):
                raise TrainingDivergedError(
                    f"non-finite gradient in parameter {name!r} at step {self.state.step}",
                    step=self.state.step, param=name)
        norm, s = clip_grad_norm(self.params.values(), c.clip_norm)
        lr = self.lr()
        b1, b2 = c.betas
        t = self.state.step + 1
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            g = p.grad
            m = self.state.m[name]
            v = self.state.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if c.weight_decay:
                p.data -= lr * c.weight_decay * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            g.fill(0.0)
        info = StepInfo(self.state.step, lr, norm, s)
        self.state.step += 1
        return info


def optimizer_step(optimizer: AdamW) -> StepInfo:
    return optimizer.step()
