"""Binary checkpoints with a stable byte layout.

Layout (all integers little-endian):

    magic            4 bytes  b"SMCP"
    version          u32      currently 1
    config hash      u16 length + utf-8 bytes
    step counter     u64
    entry count      u32
    per entry:
        name         u16 length + utf-8 bytes
        kind         u8   0 = parameter, 1 = adam m, 2 = adam v
        ndim         u8
        dims         u32 per dimension
        payload      float32 little-endian raw values (row-major)

Entries appear in model parameter order, so save -> load -> save reproduces
the file byte for byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from semcap.corpus import DataError

MAGIC = b"SMCP"
VERSION = 1
_KINDS = {"param": 0, "m": 1, "v": 2}
_KIND_NAMES = {v: k for k, v in _KINDS.items()}


@dataclass
class CheckpointData:
    config_hash: str
    params: dict
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step: int = 0


def _write_entry(fh, name: str, kind: int, arr: np.ndarray):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<BB", kind, arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path, config_hash: str, params: dict, adam_m=None,
                    adam_v=None, step: int = 0):
    """Parameters (and optionally optimizer moments) to a binary file."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    adam_m = adam_m or {}
    adam_v = adam_v or {}
    n = len(params) + len(adam_m) + len(adam_v)
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        hb = config_hash.encode("utf-8")
        fh.write(struct.pack("<H", len(hb)))
        fh.write(hb)
        fh.write(struct.pack("<Q", step))
        fh.write(struct.pack("<I", n))
        for name, arr in params.items():
            _write_entry(fh, name, _KINDS["param"], np.asarray(arr))
        for name, arr in adam_m.items():
            _write_entry(fh, name, _KINDS["m"], np.asarray(arr))
        for name, arr in adam_v.items():
            _write_entry(fh, name, _KINDS["v"], np.asarray(arr))
    tmp.replace(path)


def _read(fh, fmt):
    size = struct.calcsize(fmt)
    raw = fh.read(size)
    if len(raw) != size:
        raise DataError("checkpoint truncated")
    return struct.unpack(fmt, raw)


def load_checkpoint(path) -> CheckpointData:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise DataError(f"{path} is not a checkpoint (bad magic)")
        (version,) = _read(fh, "<I")
        if version != VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        (hlen,) = _read(fh, "<H")
        config_hash = fh.read(hlen).decode("utf-8")
        (step,) = _read(fh, "<Q")
        (count,) = _read(fh, "<I")
        out = CheckpointData(config_hash=config_hash, params={}, step=step)
        buckets = {0: out.params, 1: out.adam_m, 2: out.adam_v}
        for _ in range(count):
            (nlen,) = _read(fh, "<H")
            name = fh.read(nlen).decode("utf-8")
            kind, ndim = _read(fh, "<BB")
            if kind not in buckets:
                raise DataError(f"unknown entry kind {kind} for {name}")
            dims = tuple(_read(fh, "<I")[0] for _ in range(ndim))
            size = int(np.prod(dims)) if dims else 1
            raw = fh.read(4 * size)
            if len(raw) != 4 * size:
                raise DataError(f"checkpoint truncated inside {name}")
            buckets[kind][name] = np.frombuffer(raw, dtype="<f4").reshape(dims)
        if fh.read(1):
            raise DataError(f"{path} has trailing bytes")
    return out
