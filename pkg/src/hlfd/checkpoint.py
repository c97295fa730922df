"""HLFDCKPT1 checkpoint files.

Layout (all integers little-endian)::

    b"HLFDCKPT1\\0"
    u32 meta_len, meta_len bytes of UTF-8 JSON (net kind and NetConfig)
    u32 entry_count
    entry_count x { u16 name_len, name, u8 ndim, ndim x u32 dims, u64 offset }
    raw float64 data; each offset is relative to the start of this block
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .nets import NetConfig, SegNet, StudentNet, TeacherNet

MAGIC = b"HLFDCKPT1\0"


class CheckpointError(ValueError):
    kind = "checkpoint"


class CheckpointMagicError(CheckpointError):
    kind = "bad magic"


class CheckpointTruncatedError(CheckpointError):
    kind = "truncated"


def _meta(net: SegNet) -> dict:
    cfg = net.cfg
    return {
        "kind": net.kind,
        "encoder_channels": list(cfg.encoder_channels),
        "num_mid_layers": cfg.num_mid_layers,
        "num_classes": cfg.num_classes,
        "input_size": list(cfg.input_size),
        "in_channels": cfg.in_channels,
        "seed": cfg.seed,
    }


def encode_checkpoint(net: SegNet) -> bytes:
    meta = json.dumps(_meta(net), sort_keys=True).encode("utf-8")
    params = net.named_parameters()
    header = [MAGIC, struct.pack("<I", len(meta)), meta, struct.pack("<I", len(params))]
    blobs = []
    offset = 0
    for name, p in params.items():
        raw = name.encode("utf-8")
        header.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", p.data.ndim))
        header.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        header.append(struct.pack("<Q", offset))
        blob = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        blobs.append(blob)
        offset += len(blob)
    return b"".join(header + blobs)


def decode_checkpoint(buf: bytes) -> SegNet:
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointMagicError("bad magic: not an HLFDCKPT1 file")
    try:
        pos = len(MAGIC)
        (meta_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        manifest = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            (offset,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            manifest.append((name, shape, offset))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointTruncatedError(f"truncated or corrupt manifest: {exc}") from None

    cfg = NetConfig(
        encoder_channels=tuple(meta["encoder_channels"]),
        num_mid_layers=meta["num_mid_layers"],
        num_classes=meta["num_classes"],
        input_size=tuple(meta["input_size"]),
        in_channels=meta["in_channels"],
        seed=meta["seed"],
    )
    cls = {"teacher": TeacherNet, "student": StudentNet}.get(meta["kind"])
    if cls is None:
        raise CheckpointError(f"unknown net kind {meta['kind']!r}")
    net = cls(cfg)
    params = net.named_parameters()
    if [m[0] for m in manifest] != list(params):
        raise CheckpointError("parameter manifest does not match the network layout")
    data_start = pos
    for name, shape, offset in manifest:
        n = int(np.prod(shape))
        start = data_start + offset
        if start + 8 * n > len(buf):
            raise CheckpointTruncatedError(f"data for {name} is truncated")
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=start).astype(np.float64).reshape(shape)
        if arr.shape != params[name].shape:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {params[name].shape}")
        params[name].data = arr
    return net


def save_checkpoint(path, net: SegNet) -> None:
    Path(path).write_bytes(encode_checkpoint(net))


def load_checkpoint(path) -> SegNet:
    return decode_checkpoint(Path(path).read_bytes())


def checkpoint_digest(net: SegNet) -> str:
    return hashlib.sha256(encode_checkpoint(net)).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
