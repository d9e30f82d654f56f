"""Multi-camera occupancy network.

Pipeline: per-camera patch transformer -> per-tapped-layer cross-attention of
learned BEV queries over all cameras' tokens -> concat/upsample/conv fusion
into one BEV feature grid -> point-wise decoder on (sampled BEV feature,
normalized xyz). No camera pose or intrinsic enters anywhere; cameras are
told apart only through learned per-slot embeddings.

BEV grids are channels-last ``(B, side, side, C)`` with rows indexing y and
columns indexing x, matching the sampling convention of
``bilinear_sample_2d``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from ..diffcore import Tensor, no_grad
from ..diffcore import functional as F
from ..errors import ConfigError
from ..geometry import normalize_point
from .config import PROJECTOR_VARIANTS, ModelConfig
from .layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, normal_init
from .layers import param


@dataclass
class AttentionRecord:
    """Head-averaged cross-attention of one projector block.

    ``weights`` is ``(B, queries, tokens)``; ``camera_ranges[i]`` is the token
    slice ``(start, stop)`` belonging to camera ``i``.
    """

    layer: int
    block: int
    weights: np.ndarray
    camera_ranges: tuple

    def camera_mass(self) -> np.ndarray:
        """``(B, queries, cameras)`` attention mass per camera."""
        return np.stack([self.weights[..., a:b].sum(axis=-1) for a, b in self.camera_ranges],
                        axis=-1)


def argmax_camera_map(records: Sequence[AttentionRecord], side: int, item: int = 0) -> np.ndarray:
    """Per BEV cell, the camera receiving the most attention summed over records."""
    mass = sum(r.camera_mass()[item] for r in records)
    return mass.argmax(axis=-1).reshape(side, side)


def _views_array(views) -> np.ndarray:
    data = getattr(views, "data", views)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 4:
        data = data[None]
    return data


class EncoderBlock(Module):
    def __init__(self, rng, width, heads, ffn_ratio, out_gain):
        self.ln1 = LayerNorm(width)
        self.attn = MultiHeadAttention(rng, width, heads, out_gain=out_gain)
        self.ln2 = LayerNorm(width)
        self.ffn = FeedForward(rng, width, ffn_ratio * width, out_gain=out_gain)

    def __call__(self, x):
        h = self.ln1(x)
        x = F.add(x, self.attn(h, h)[0])
        return F.add(x, self.ffn(self.ln2(x)))


class ProjectorBlock(Module):
    """Attention (cross over tokens, or self over queries) + FFN, post-norm."""

    def __init__(self, rng, kind, channels, kv_dim, heads, ffn_ratio):
        self._kind = kind
        self.attn = MultiHeadAttention(rng, channels, heads,
                                       kv_dim=kv_dim if kind == "ca" else channels)
        self.ln1 = LayerNorm(channels)
        self.ffn = FeedForward(rng, channels, ffn_ratio * channels)
        self.ln2 = LayerNorm(channels)

    def __call__(self, q, kv, need_weights=False):
        src = kv if self._kind == "ca" else q
        a, w = self.attn(q, src, need_weights and self._kind == "ca")
        q = self.ln1(F.add(q, a))
        q = self.ln2(F.add(q, self.ffn(q)))
        return q, w


class BevProjector(Module):
    def __init__(self, rng, cfg: ModelConfig):
        c, w = cfg.bev_channels, cfg.encoder_width
        self.queries = normal_init(rng, (cfg.bev_side ** 2, c), 1.0)
        self.camera_embed = normal_init(rng, (cfg.num_cameras, w), 0.02)
        self.kv_norm = LayerNorm(w)
        self.blocks = [ProjectorBlock(rng, kind, c, w, cfg.heads, cfg.ffn_ratio)
                       for kind in PROJECTOR_VARIANTS[cfg.projector]]


class FusionStage(Module):
    def __init__(self, rng, c_in, c_out):
        self.weight = normal_init(rng, (3, 3, c_in, c_out), np.sqrt(2.0 / (9 * c_in)))
        self.bias = param(np.zeros(c_out))

    def __call__(self, x):
        return F.gelu(F.conv2d(F.upsample_nearest2x(x), self.weight, self.bias))


class ResidualBlock(Module):
    def __init__(self, rng, width):
        self.fc0 = Linear(rng, width, width, gain=np.sqrt(2.0))
        self.fc1 = Linear(rng, width, width, gain=0.5)

    def __call__(self, x):
        return F.add(x, self.fc1(F.relu(self.fc0(F.relu(x)))))


class OccupancyNet(Module):
    def __init__(self, cfg: ModelConfig):
        self._cfg = cfg
        self._encoder_calls = 0
        rng = np.random.default_rng(cfg.seed)
        w, p = cfg.encoder_width, cfg.patch_size
        out_gain = 1.0 / np.sqrt(2.0 * cfg.encoder_depth)
        self.patch_embed = Linear(rng, cfg.in_channels * p * p, w)
        self.pos_embed = normal_init(rng, (cfg.tokens_per_camera, w), 0.02)
        self.blocks = [EncoderBlock(rng, w, cfg.heads, cfg.ffn_ratio, out_gain)
                       for _ in range(cfg.encoder_depth)]
        self.projectors = [BevProjector(rng, cfg) for _ in cfg.tapped_layers]
        c_in = len(cfg.tapped_layers) * cfg.bev_channels
        stages = []
        for _ in range(cfg.upsample_stages):
            stages.append(FusionStage(rng, c_in, cfg.fusion_width))
            c_in = cfg.fusion_width
        self.fusion = stages
        self.fusion_out = normal_init(rng, (1, 1, c_in, cfg.fused_channels), 1.0 / np.sqrt(c_in))
        self.fusion_out_bias = param(np.zeros(cfg.fused_channels))
        h, cf = cfg.decoder_hidden, cfg.fused_channels
        self.dec_in = Linear(rng, cf + 3, h)
        self.dec_feat = [Linear(rng, cf, h, gain=0.5) for _ in range(cfg.decoder_blocks)]
        self.dec_blocks = [ResidualBlock(rng, h) for _ in range(cfg.decoder_blocks)]
        self.dec_out = Linear(rng, h, 1, gain=1e-2)

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def encoder_calls(self) -> int:
        return self._encoder_calls

    # -- encoder -------------------------------------------------------------

    def _patchify(self, data: np.ndarray) -> np.ndarray:
        cfg = self._cfg
        b, ncam, c, h, w = data.shape
        if (ncam, c, h, w) != (cfg.num_cameras, cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ConfigError(
                f"views shaped {(ncam, c, h, w)} do not match the model's "
                f"(num_cameras, in_channels, image_size, image_size) = "
                f"{(cfg.num_cameras, cfg.in_channels, cfg.image_size, cfg.image_size)}")
        p = cfg.patch_size
        x = data.reshape(b * ncam, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(b * ncam, (h // p) * (w // p), c * p * p)

    def encode_views(self, views) -> List[Tensor]:
        """Token sets ``(B, cameras, tokens, width)``, one per tapped layer.

        Each camera is encoded independently; ``views`` is ``(B, cameras, 2, H, W)``
        (a single ``RenderedViews`` or 4-D array is treated as B = 1).
        """
        data = _views_array(views)
        self._encoder_calls += 1
        b, ncam = data.shape[:2]
        x = F.add(self.patch_embed(Tensor(self._patchify(data))), self.pos_embed)
        taps = {}
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x)
            if i in self._cfg.tapped_layers:
                taps[i] = x
        t, w = x.shape[1:]
        return [F.reshape(taps[i], (b, ncam, t, w)) for i in self._cfg.tapped_layers]

    # -- projection ----------------------------------------------------------

    def project_to_bev(self, tokens: Tensor, layer: int,
                       records: Optional[list] = None) -> Tensor:
        """Cross-attend tapped layer ``layer``'s BEV queries to all cameras' tokens."""
        cfg = self._cfg
        proj = self.projectors[layer]
        b, ncam, t, w = tokens.shape
        kv = F.add(tokens, F.reshape(proj.camera_embed, (1, ncam, 1, w)))
        kv = proj.kv_norm(F.reshape(kv, (b, ncam * t, w)))
        q = F.add(Tensor(np.zeros((b,) + proj.queries.shape)), proj.queries)
        ranges = tuple((i * t, (i + 1) * t) for i in range(ncam))
        for j, blk in enumerate(proj.blocks):
            q, weights = blk(q, kv, need_weights=records is not None)
            if records is not None and weights is not None:
                records.append(AttentionRecord(layer, j, weights, ranges))
        return F.reshape(q, (b, cfg.bev_side, cfg.bev_side, cfg.bev_channels))

    # -- fusion --------------------------------------------------------------

    def fuse_and_upsample(self, maps: Sequence[Tensor], return_pre_projection: bool = False):
        """Concat per-layer BEV maps, upsample to the fused resolution, project channels."""
        if len(maps) != len(self.projectors):
            raise ConfigError(f"expected {len(self.projectors)} BEV maps, got {len(maps)}")
        if len({m.shape for m in maps}) != 1:
            raise ConfigError("BEV maps must share one shape")
        x = F.concat(list(maps), axis=-1)
        for stage in self.fusion:
            x = stage(x)
        out = F.conv2d(x, self.fusion_out, self.fusion_out_bias)
        return (out, x) if return_pre_projection else out

    def bev_grid(self, views, records: Optional[list] = None) -> Tensor:
        tokens = self.encode_views(views)
        maps = [self.project_to_bev(tok, i, records) for i, tok in enumerate(tokens)]
        return self.fuse_and_upsample(maps)

    # -- decoder -------------------------------------------------------------

    def decode_logits(self, fused: Tensor, points, item: int = 0) -> Tensor:
        """Occupancy logits ``(N,)`` for points of batch element ``item``."""
        q = normalize_point(np.asarray(points, dtype=np.float64).reshape(-1, 3), self._cfg.roi)
        grid = F.permute(F.take(fused, item), (2, 0, 1))
        feat = F.bilinear_sample_2d(grid, Tensor(q[:, :2]))
        h = self.dec_in(F.concat([feat, Tensor(q)], axis=-1))
        for fc, blk in zip(self.dec_feat, self.dec_blocks):
            h = blk(F.add(h, fc(feat)))
        out = self.dec_out(F.relu(h))
        return F.reshape(out, (out.shape[0],))

    def decode_occupancy(self, fused: Tensor, points, item: int = 0) -> np.ndarray:
        with no_grad():
            return F.sigmoid(self.decode_logits(fused, points, item)).data

    def forward(self, views, points_per_item: Sequence) -> Tensor:
        """Logits for each batch element's points, concatenated in order."""
        fused = self.bev_grid(views)
        outs = [self.decode_logits(fused, pts, i) for i, pts in enumerate(points_per_item)]
        return outs[0] if len(outs) == 1 else F.concat(outs, axis=0)


class OccupancyFieldHandle:
    """Frozen network plus the cached fused BEV grid for one set of views.

    Calling the handle on ``(N, 3)`` points returns probabilities; only the
    decoder runs per call.
    """

    def __init__(self, net: OccupancyNet, views, chunk: int = 65536):
        self.net = net
        self.config = net.config
        self.chunk = chunk
        with no_grad():
            self.grid = net.bev_grid(views)

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(pts))
        for s in range(0, len(pts), self.chunk):
            out[s:s + self.chunk] = self.net.decode_occupancy(self.grid, pts[s:s + self.chunk])
        return out


def freeze(net: OccupancyNet, views, chunk: int = 65536) -> OccupancyFieldHandle:
    return OccupancyFieldHandle(net, views, chunk)
