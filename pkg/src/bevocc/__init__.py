"""Self-supervised BEV occupancy fields from multi-view images and LiDAR rays."""

__version__ = "0.1.0"
