"""Binary checkpoint format for encoder + head weights.

Layout: 8-byte magic, u32 format version, u32 header length, JSON header
(encoder config, category names and raw mapping, feature-config hash,
metadata, per-tensor name/shape/offset index), contiguous little-endian
float32 payload, trailing CRC-32 of the payload.  Round trips are bit-exact
and save/load/save produces byte-identical files.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import MelConfig
from .errors import CheckpointError
from .ingest import CategoryMap
from .nn import EncoderConfig, ParamStore, param_shapes

MAGIC = b"UATRCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Everything needed to run inference on raw audio."""

    params: ParamStore
    config: EncoderConfig
    category_map: CategoryMap
    mel_config: MelConfig
    sample_rate: int
    metadata: dict = field(default_factory=dict)

    @property
    def categories(self) -> list[str]:
        return self.category_map.categories


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    tensors = ckpt.params.tensors
    index = []
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)

    header = json.dumps({
        "config": ckpt.config.to_json(),
        "categories": ckpt.category_map.categories,
        "raw_to_category": ckpt.category_map.raw_to_category,
        "feature_config": ckpt.mel_config.to_json(),
        "feature_config_hash": ckpt.mel_config.hash(),
        "sample_rate": ckpt.sample_rate,
        "metadata": ckpt.metadata,
        "tensors": index,
        "payload_bytes": len(payload),
    }, sort_keys=True).encode()

    blob = (MAGIC + struct.pack("<II", FORMAT_VERSION, len(header))
            + header + payload + struct.pack("<I", zlib.crc32(payload)))
    Path(path).write_bytes(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(raw[16:16 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None

    payload_len = header["payload_bytes"]
    body_start = 16 + hlen
    if len(raw) != body_start + payload_len + 4:
        raise CheckpointError(f"{path}: truncated or padded payload")
    payload = raw[body_start:body_start + payload_len]
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: payload checksum mismatch")

    config = EncoderConfig.from_json(header["config"])
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).copy()

    expected = param_shapes(config)
    if {n: t.shape for n, t in tensors.items()} != expected:
        raise CheckpointError(f"{path}: tensor index inconsistent with config")
    categories = header["categories"]
    if len(categories) != config.num_categories:
        raise CheckpointError(
            f"{path}: {len(categories)} category names for a "
            f"{config.num_categories}-way head")

    return Checkpoint(
        params=ParamStore(tensors),
        config=config,
        category_map=CategoryMap(categories, header["raw_to_category"]),
        mel_config=MelConfig.from_json(header["feature_config"]),
        sample_rate=header["sample_rate"],
        metadata=header.get("metadata", {}),
    )
