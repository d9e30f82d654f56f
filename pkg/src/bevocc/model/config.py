"""Network hyperparameters."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

from ..errors import ConfigError
from ..geometry import DESK_ROI, PAPER_ROI, RoiBox

PROJECTOR_VARIANTS = {
    "ca": ("ca",),
    "ca_ca": ("ca", "ca"),
    "ca_sa_ca": ("ca", "sa", "ca"),
}


def _power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    in_channels: int = 2
    num_cameras: int = 4
    patch_size: int = 8
    encoder_depth: int = 6
    encoder_width: int = 128
    heads: int = 4
    ffn_ratio: int = 2
    tapped_layers: tuple = (3, 4, 5, 6)
    bev_side: int = 16
    bev_channels: int = 128
    projector: str = "ca_ca"
    fused_resolution: int = 64
    fused_channels: int = 64
    fusion_width: int = 32
    decoder_hidden: int = 128
    decoder_blocks: int = 2
    roi: RoiBox = field(default=DESK_ROI)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tapped_layers", tuple(int(i) for i in self.tapped_layers))
        if isinstance(self.roi, (list, tuple)):
            object.__setattr__(self, "roi", RoiBox.from_list(self.roi))
        pos = ("image_size", "in_channels", "num_cameras", "patch_size", "encoder_depth",
               "encoder_width", "heads", "ffn_ratio", "bev_channels", "fused_channels",
               "fusion_width", "decoder_hidden")
        for name in pos:
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.decoder_blocks < 0:
            raise ConfigError(f"decoder_blocks must be >= 0, got {self.decoder_blocks}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size "
                              f"{self.patch_size}")
        if not self.tapped_layers:
            raise ConfigError("tapped_layers must not be empty")
        if any(i < 1 or i > self.encoder_depth for i in self.tapped_layers):
            raise ConfigError(f"tapped_layers {self.tapped_layers} must lie in "
                              f"[1, encoder_depth={self.encoder_depth}]")
        if self.encoder_width % self.heads or self.bev_channels % self.heads:
            raise ConfigError("encoder_width and bev_channels must be divisible by heads")
        if not _power_of_two(self.bev_side):
            raise ConfigError(f"bev_side must be a power of two, got {self.bev_side}")
        ratio = self.fused_resolution // self.bev_side
        if self.fused_resolution % self.bev_side or not _power_of_two(ratio):
            raise ConfigError(f"fused_resolution {self.fused_resolution} must be a power-of-two "
                              f"multiple of bev_side {self.bev_side}")
        if self.projector not in PROJECTOR_VARIANTS:
            raise ConfigError(f"projector must be one of {sorted(PROJECTOR_VARIANTS)}, "
                              f"got {self.projector!r}")

    @property
    def tokens_per_camera(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def upsample_stages(self) -> int:
        return (self.fused_resolution // self.bev_side).bit_length() - 1

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roi"] = self.roi.to_list()
        d["tapped_layers"] = list(self.tapped_layers)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        """Two cameras, 16 x 16 rasters; small enough for finite-difference checks."""
        base = dict(image_size=16, num_cameras=2, patch_size=8, encoder_depth=2,
                    encoder_width=8, heads=2, ffn_ratio=2, tapped_layers=(1, 2), bev_side=4,
                    bev_channels=8, fused_resolution=8, fused_channels=4, fusion_width=4,
                    decoder_hidden=8, decoder_blocks=1)
        base.update(kw)
        return cls(**base)

    @classmethod
    def paper(cls, **kw) -> "ModelConfig":
        """Full-scale sizes: ViT-L style encoder, 1024 queries x 1024 channels, 256^2 x 256."""
        base = dict(image_size=448, num_cameras=6, patch_size=14, encoder_depth=24,
                    encoder_width=1024, heads=16, ffn_ratio=4, tapped_layers=(21, 22, 23, 24),
                    bev_side=32, bev_channels=1024, fused_resolution=256, fused_channels=256,
                    fusion_width=256, decoder_hidden=256, roi=PAPER_ROI)
        base.update(kw)
        return cls(**base)
