"""Binary checkpoint files.

Little-endian layout::

    b"MQI1"
    u32 version (= 1)
    u32 n, n bytes of UTF-8 config text, one ``key=value`` per line
    u32 record count
    per record:
        u16 name length, name bytes (UTF-8)
        u8  ndim, ndim x u32 extents
        prod(extents) x f32 values

Records are written in the model's parameter order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .network import MQINet, ModelConfig

MAGIC = b"MQI1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _config_text(cfg: ModelConfig) -> bytes:
    return "".join(f"{k}={v}\n" for k, v in cfg.to_dict().items()).encode()


def dumps(model: MQINet) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    cfg = _config_text(model.config)
    out += [struct.pack("<I", len(cfg)), cfg]
    named = list(model.named_parameters())
    out.append(struct.pack("<I", len(named)))
    for name, p in named:
        nb = name.encode()
        out += [struct.pack("<H", len(nb)), nb, struct.pack("<B", p.ndim)]
        out.append(struct.pack(f"<{p.ndim}I", *p.shape))
        out.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes) -> MQINet:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not an MQI checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (n,) = r.unpack("<I")
    text = r.take(n).decode()
    cfg = ModelConfig.from_dict(dict(line.split("=", 1) for line in text.splitlines() if line))
    model = MQINet(cfg)
    params = dict(model.named_parameters())
    (count,) = r.unpack("<I")
    if count != len(params):
        raise CheckpointError(f"checkpoint has {count} tensors, model expects {len(params)}")
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        if name not in params:
            raise CheckpointError(f"unknown tensor {name!r}")
        p = params[name]
        if tuple(shape) != p.shape:
            raise CheckpointError(f"{name}: shape {tuple(shape)} but model has {p.shape}")
        size = int(np.prod(shape, dtype=np.int64))
        p.data = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last record")
    return model


def save_checkpoint(model: MQINet, path) -> None:
    Path(path).write_bytes(dumps(model))


def load_checkpoint(path) -> MQINet:
    return loads(Path(path).read_bytes())
