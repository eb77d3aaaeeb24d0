"""Binary checkpoints.

Layout (little-endian)::

    b"VPRC" | u32 version | u32 n + arch tag | u32 n + JSON model meta
    | u32 entries | per entry: u32 n + name, u32 ndim, u32 extents..., u64 payload offset
    | float32 payload | u32 CRC32 of all preceding bytes
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .layers import (
    BackboneSpec,
    ConvAPHead,
    ConvBlock,
    GeMHead,
    MixVPRHead,
    NetVLADHead,
    VPRModel,
)
from .tensor import Tensor

MAGIC = b"VPRC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _model_meta(model: VPRModel) -> dict:
    spec = model.spec
    return {
        "blocks": [[b.out_channels, b.kernel, b.stride, b.residual_group] for b in spec.blocks],
        "in_channels": spec.in_channels,
        "image_size": list(spec.image_size),
        "dense_widths": list(model.dense_widths),
        "head": model.head.meta(),
    }


def _str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def to_bytes(model: VPRModel) -> bytes:
    params = model.params()
    header = bytearray(MAGIC + struct.pack("<I", VERSION))
    header += _str(model.arch)
    header += _str(json.dumps(_model_meta(model), sort_keys=True))
    header += struct.pack("<I", len(params))
    payload = bytearray()
    for name, t in params.items():
        arr = np.asarray(t.data, dtype="<f4")  # keeps 0-d shapes (ascontiguousarray would not)
        header += _str(name) + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        header += struct.pack("<Q", len(payload))
        payload += arr.tobytes()
    body = bytes(header + payload)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, fmt: str):
        try:
            vals = struct.unpack_from(fmt, self.raw, self.pos)
        except struct.error as exc:
            raise CheckpointError(f"truncated checkpoint: {exc}") from exc
        self.pos += struct.calcsize(fmt)
        return vals

    def string(self) -> str:
        (n,) = self.take("<I")
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint string")
        s = self.raw[self.pos : self.pos + n].decode("utf-8")
        self.pos += n
        return s


def from_bytes(raw: bytes) -> VPRModel:
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:4]!r}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch (corrupt or truncated file)")
    rd = _Reader(body)
    rd.pos = 4
    (version,) = rd.take("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arch = rd.string()
    meta = json.loads(rd.string())
    (count,) = rd.take("<I")
    table = []
    for _ in range(count):
        name = rd.string()
        (ndim,) = rd.take("<I")
        shape = rd.take(f"<{ndim}I") if ndim else ()
        (offset,) = rd.take("<Q")
        table.append((name, tuple(shape), offset))
    start = rd.pos
    params = {}
    for name, shape, offset in table:
        nbytes = 4 * int(np.prod(shape))
        lo = start + offset
        if lo + nbytes > len(body):
            raise CheckpointError(f"payload for {name} runs past end of file")
        arr = np.frombuffer(body[lo : lo + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True)
    return _assemble(arch, meta, params)


def _assemble(arch: str, meta: dict, params: dict[str, Tensor]) -> VPRModel:
    spec = BackboneSpec([ConvBlock(*b) for b in meta["blocks"]], meta["in_channels"], tuple(meta["image_size"]))
    backbone = {k: v for k, v in params.items() if k.startswith("conv")}
    hm = meta["head"]
    if arch == "gem":
        head = GeMHead(params["gem.p"])
    elif arch == "convap":
        head = ConvAPHead(hm["block"])
    elif arch == "mixvpr":
        n = hm["blocks"]
        head = MixVPRHead([params[f"mix{i}.w1"] for i in range(n)], [params[f"mix{i}.w2"] for i in range(n)],
                          params["mix.wd"], params["mix.wr"], hm["dense_depth"])
    elif arch == "netvlad":
        head = NetVLADHead(params["vlad.centers"], params["vlad.assign_w"], params["vlad.assign_b"],
                           hm["alpha"], hm["normalize_input"], hm["dense_clusters"])
    else:
        raise CheckpointError(f"unknown architecture tag {arch!r}")
    model = VPRModel(arch, spec, backbone, head, list(meta["dense_widths"]))
    model.check_contract()
    return model


def save(model: VPRModel, path) -> Path:
    p = Path(path)
    p.write_bytes(to_bytes(model))
    return p


def load(path) -> VPRModel:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint {p} not found")
    return from_bytes(p.read_bytes())


def shape_table(path_or_bytes) -> list[tuple[str, tuple]]:
    raw = Path(path_or_bytes).read_bytes() if not isinstance(path_or_bytes, bytes) else path_or_bytes
    return [(k, v.shape) for k, v in from_bytes(raw).params().items()]
