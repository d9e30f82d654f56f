"""``VGTC`` checkpoints: config JSON plus a named float64 tensor table.

Layout (little-endian): magic | u32 version | u32 json length | json bytes |
u32 tensor count | per tensor: u32 name length | name | u8 dtype (1 = f64) |
u8 rank | rank x u32 dims | f64 payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import FormatError
from .config import ModelConfig
from .network import OccupancyNet

MAGIC = b"VGTC"
VERSION = 1
_F64 = 1


def encode_checkpoint(net: OccupancyNet, extra: Optional[dict] = None) -> bytes:
    meta = {"model": net.config.to_dict()}
    if extra:
        meta["extra"] = extra
    blob = json.dumps(meta, sort_keys=True).encode()
    params = net.named_parameters()
    out = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(params))]
    for name, p in params.items():
        key = name.encode()
        out.append(struct.pack("<I", len(key)) + key)
        out.append(struct.pack("<BB", _F64, p.data.ndim))
        out.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        out.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(out)


def decode_checkpoint(buf: bytes):
    """Returns ``(net, extra)``."""
    try:
        return _decode(buf)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as err:
        if isinstance(err, FormatError):
            raise
        raise FormatError(f"corrupt VGTC checkpoint: {err}") from None


def _decode(buf: bytes):
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FormatError("not a VGTC checkpoint")
    version, n_json = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported VGTC version {version}")
    off = 12
    meta = json.loads(buf[off:off + n_json].decode())
    off += n_json
    net = OccupancyNet(ModelConfig.from_dict(meta["model"]))
    params = net.named_parameters()
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    seen = set()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode()
        off += n
        dtype, rank = struct.unpack_from("<BB", buf, off)
        off += 2
        if dtype != _F64:
            raise FormatError(f"tensor {name}: unsupported dtype code {dtype}")
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(dims)
        off += 8 * size
        if name not in params:
            raise FormatError(f"checkpoint tensor {name} has no matching parameter")
        if params[name].shape != tuple(dims):
            raise FormatError(f"tensor {name}: shape {dims} != expected {params[name].shape}")
        params[name].data = data.astype(np.float64)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise FormatError(f"checkpoint lacks tensors {sorted(missing)[:5]}")
    if off != len(buf):
        raise FormatError("trailing bytes after tensor table")
    return net, meta.get("extra")


def save_checkpoint(path, net: OccupancyNet, extra: Optional[dict] = None) -> None:
    Path(path).write_bytes(encode_checkpoint(net, extra))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
