"""Bit-exact model persistence.

Layout (all integers little-endian)::

    8 bytes   magic  b"DYRKCKPT"
    4 bytes   format version (uint32)
    8 bytes   manifest length in bytes (uint64)
    N bytes   manifest, UTF-8 JSON
    P bytes   payload: float64 tensors back to back, row-major
    4 bytes   CRC-32 of the payload (uint32)

The manifest holds the model config, the adapter list, and one
``{name, shape, offset, length}`` entry per tensor in payload order.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .adapter import RankSelectiveAdapter
from .model import DualEncoderConfig, DualEncoderModel

MAGIC = b"DYRKCKPT"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<8sIQ")
_CRC = struct.Struct("<I")


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointManifestError(CheckpointError):
    pass


def _adapter_tensors(model: DualEncoderModel):
    for ad in model.adapters():
        enc, layer, site = ad.target
        prefix = f"adapter/{enc}/{layer}/{site}"
        yield ad, [(f"{prefix}/A", ad.A.data), (f"{prefix}/B", ad.B.data), (f"{prefix}/w", ad.w.data)]


def checkpoint_bytes(model: DualEncoderModel) -> bytes:
    tensors = [(name, t.data) for name, t in model.named_parameters()]
    adapters = []
    for ad, parts in _adapter_tensors(model):
        adapters.append({"target": list(ad.target), "r_init": ad.r_init})
        tensors.extend(parts)
    entries, chunks, offset = [], [], 0
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"model": model.cfg.to_dict(), "adapters": adapters, "tensors": entries},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(chunks)
    return _HEAD.pack(MAGIC, FORMAT_VERSION, len(manifest)) + manifest + payload + _CRC.pack(zlib.crc32(payload))


def save_checkpoint(model: DualEncoderModel, path) -> Path:
    path = Path(path)
    try:
        path.write_bytes(checkpoint_bytes(model))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def parse_checkpoint(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _HEAD.size:
        raise CheckpointManifestError("file too short for a checkpoint header")
    magic, version, mlen = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointManifestError("bad magic; not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint format version {version}")
    start = _HEAD.size
    if start + mlen > len(blob):
        raise CheckpointManifestError("manifest extends past end of file")
    try:
        manifest = json.loads(blob[start:start + mlen].decode("utf-8"))
        entries = manifest["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointManifestError(f"unreadable manifest: {exc}") from exc
    payload_start = start + mlen
    expected = 0
    for e in entries:
        n = int(np.prod(e["shape"], dtype=np.int64)) * 8
        if e["offset"] != expected or e["length"] != n:
            raise CheckpointManifestError(f"tensor {e['name']!r} has inconsistent offset/length/shape")
        expected += n
    if payload_start + expected + _CRC.size != len(blob):
        raise CheckpointManifestError("file length does not match the manifest (truncated or padded)")
    payload = blob[payload_start:payload_start + expected]
    (crc,) = _CRC.unpack_from(blob, payload_start + expected)
    if zlib.crc32(payload) != crc:
        raise CheckpointChecksumError("payload checksum mismatch")
    tensors = {e["name"]: np.frombuffer(payload, dtype="<f8", count=e["length"] // 8,
                                        offset=e["offset"]).reshape(e["shape"]).astype(np.float64)
               for e in entries}
    return manifest, tensors


def load_checkpoint(path) -> DualEncoderModel:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    manifest, tensors = parse_checkpoint(blob)
    try:
        cfg = DualEncoderConfig(**manifest["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointManifestError(f"invalid model config in manifest: {exc}") from exc
    base = {k: v for k, v in tensors.items() if not k.startswith("adapter/")}
    reference = DualEncoderModel(cfg, seed=0)
    want = {name: t.shape for name, t in reference.named_parameters()}
    got = {name: v.shape for name, v in base.items()}
    if want != got:
        raise CheckpointManifestError("checkpoint tensors do not match the model config")
    model = DualEncoderModel(cfg, params=base)
    if manifest.get("adapters"):
        model.set_trainable(False)
    for meta in manifest.get("adapters", []):
        enc, layer, site = meta["target"]
        prefix = f"adapter/{enc}/{layer}/{site}"
        try:
            ad = RankSelectiveAdapter((enc, int(layer), site), tensors[f"{prefix}/A"],
                                      tensors[f"{prefix}/B"], tensors[f"{prefix}/w"], meta["r_init"])
        except (KeyError, ValueError) as exc:
            raise CheckpointManifestError(f"bad adapter entry {prefix}: {exc}") from exc
        model.encoder(enc).adapters[(int(layer), site)] = ad
    return model
