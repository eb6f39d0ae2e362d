"""AGBN weight files.

Layout (all integers little-endian)::

    "AGBN" | u32 version=1 | u32 record count | records... | u32 CRC-32 of all prior bytes

    record := u16 name length | UTF-8 name | u8 rank | rank x u32 extents | payload

Tensor payloads are float32. The record named ``__manifest__`` is rank 1 and
its payload is the UTF-8 manifest text itself (extent = byte length).

The manifest describes the graph, one layer per line::

    # arch=resnet-mini class_count=10 input_channels=3
    0 conv name=stem in=3 out=16 k=3 stride=1 pad=1 params=stem.weight,stem.bias
    2 bn name=g1b0.bn1 channels=16 eps=1e-05 mode=source params=g1b0.bn1.gamma,...

BN running statistics are stored as ``<layer>.running_mean`` / ``<layer>.running_var``.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from pathlib import Path

import numpy as np

from augbn.errors import (
    BadMagicError,
    ChecksumError,
    DataFormatError,
    ShapeError,
    ShapeMismatchError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from augbn.model import LayerSpec, ModelGraph
from augbn.tensor import ChannelStats

MAGIC = b"AGBN"
VERSION = 1
MANIFEST = "__manifest__"


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def manifest_text(model: ModelGraph) -> str:
    lines = [f"# arch={model.arch} class_count={model.class_count} input_channels={model.input_channels}"]
    for i, layer in enumerate(model.layers):
        fields = [str(i), layer.kind, f"name={layer.name}"]
        fields += [f"{k}={_fmt(v)}" for k, v in layer.hp.items()]
        if layer.kind == "bn":
            fields.append(f"mode={model.bn_mask[layer.name]}")
        pnames = layer.param_names()
        if layer.kind == "bn":
            pnames += [f"{layer.name}.running_mean", f"{layer.name}.running_var"]
        if pnames:
            fields.append("params=" + ",".join(pnames))
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def _parse_value(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def parse_manifest(text: str):
    """Return (header dict, list of (LayerSpec, mode or None, param names))."""
    header: dict[str, str] = {}
    layers = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for item in line[1:].split():
                key, _, value = item.partition("=")
                header[key] = value
            continue
        parts = line.split()
        if len(parts) < 3 or not parts[0].isdigit():
            raise DataFormatError(f"manifest line {lineno} is malformed: {line!r}")
        if int(parts[0]) != len(layers):
            raise DataFormatError(f"manifest line {lineno}: layer index {parts[0]} out of order")
        kind = parts[1]
        kv = dict(p.split("=", 1) for p in parts[2:])
        name = kv.pop("name")
        mode = kv.pop("mode", None)
        pnames = kv.pop("params", "").split(",") if "params" in kv else []
        hp = {k: _parse_value(v) for k, v in kv.items()}
        layers.append((LayerSpec(kind, name, hp), mode, pnames))
    for key in ("arch", "class_count", "input_channels"):
        if key not in header:
            raise DataFormatError(f"manifest header lacks {key}")
    return header, layers


def _records(model: ModelGraph) -> list[tuple[str, np.ndarray]]:
    recs = []
    for layer in model.layers:
        for pname in layer.param_names():
            recs.append((pname, model.params[pname]))
        if layer.kind == "bn":
            stats = model.bn_stats[layer.name]
            recs.append((f"{layer.name}.running_mean", stats.mean))
            recs.append((f"{layer.name}.running_var", stats.variance))
    return recs


def model_to_bytes(model: ModelGraph) -> bytes:
    manifest = manifest_text(model).encode("utf-8")
    recs = _records(model)
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(recs) + 1)

    def header(name: str, extents) -> None:
        raw = name.encode("utf-8")
        out.extend(struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(extents)))
        out.extend(struct.pack(f"<{len(extents)}I", *extents))

    header(MANIFEST, (len(manifest),))
    out += manifest
    for name, arr in recs:
        header(name, arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file ends inside {what} (need {n} bytes at offset {self.pos})")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def model_from_bytes(buf: bytes) -> ModelGraph:
    if len(buf) < 4:
        raise TruncatedFileError("file shorter than the magic number")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r = _Reader(buf)
    r.pos = 4
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported AGBN version {version}")
    (count,) = r.unpack("<I", "record count")
    tensors: dict[str, np.ndarray] = {}
    manifest = None
    for _ in range(count):
        (nlen,) = r.unpack("<H", "record name length")
        name = r.take(nlen, "record name").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        extents = r.unpack(f"<{rank}I", f"extents of {name}")
        if name == MANIFEST:
            if rank != 1:
                raise DataFormatError("manifest record must be rank 1")
            manifest = r.take(extents[0], "manifest").decode("utf-8")
            continue
        size = int(np.prod(extents)) if rank else 1
        payload = r.take(4 * size, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(extents).astype(np.float32)
    body_end = r.pos
    (stored,) = r.unpack("<I", "checksum")
    if r.pos != len(buf):
        raise DataFormatError(f"{len(buf) - r.pos} trailing bytes after checksum")
    if zlib.crc32(buf[:body_end]) & 0xFFFFFFFF != stored:
        raise ChecksumError("CRC-32 mismatch")
    if manifest is None:
        raise DataFormatError("file has no manifest record")
    return _assemble(manifest, tensors)


def _assemble(manifest: str, tensors: dict[str, np.ndarray]) -> ModelGraph:
    header, entries = parse_manifest(manifest)
    layers, mask, stats = [], {}, {}
    for layer, mode, pnames in entries:
        layers.append(layer)
        for pname in pnames:
            if pname not in tensors:
                raise ShapeMismatchError(f"manifest names {pname} but the file holds no such tensor")
        expected = layer.param_shapes()
        for pname, shape in expected.items():
            if pname not in tensors:
                raise ShapeMismatchError(f"missing tensor {pname}")
            if tensors[pname].shape != shape:
                raise ShapeMismatchError(f"{pname}: manifest implies {shape}, file holds {tensors[pname].shape}")
        if layer.kind == "bn":
            c = layer.hp["channels"]
            mean = tensors.get(f"{layer.name}.running_mean")
            var = tensors.get(f"{layer.name}.running_var")
            if mean is None or var is None or mean.shape != (c,) or var.shape != (c,):
                raise ShapeMismatchError(f"{layer.name}: running stats missing or not of length {c}")
            stats[layer.name] = ChannelStats(mean, var)
            mask[layer.name] = mode or "source"
    params = {k: v for k, v in tensors.items() if not k.endswith((".running_mean", ".running_var"))}
    try:
        return ModelGraph(
            header["arch"],
            tuple(layers),
            params,
            stats,
            mask,
            int(header["class_count"]),
            int(header["input_channels"]),
        )
    except ShapeError as exc:
        raise ShapeMismatchError(str(exc)) from exc


def save_weights(model: ModelGraph, path) -> Path:
    path = Path(path)
    path.write_bytes(model_to_bytes(model))
    return path


def load_weights(path) -> ModelGraph:
    return model_from_bytes(Path(path).read_bytes())


def model_digest(model: ModelGraph) -> str:
    """SHA-256 of the model's AGBN serialization."""
    return hashlib.sha256(model_to_bytes(model)).hexdigest()
