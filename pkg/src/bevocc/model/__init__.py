"""Camera-only occupancy network, frozen field handles and checkpoints."""

from .checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .config import PROJECTOR_VARIANTS, ModelConfig
from .layers import Linear, Module
from .network import (
    AttentionRecord,
    OccupancyFieldHandle,
    OccupancyNet,
    argmax_camera_map,
    freeze,
)

__all__ = [
    "PROJECTOR_VARIANTS", "AttentionRecord", "Linear", "ModelConfig", "Module",
    "OccupancyFieldHandle", "OccupancyNet", "argmax_camera_map", "decode_checkpoint",
    "encode_checkpoint", "freeze", "load_checkpoint", "save_checkpoint",
]
