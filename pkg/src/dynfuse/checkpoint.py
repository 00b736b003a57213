"""Model checkpoints: ``DMCK`` | u32 header length | JSON header | float64 parameters.

The header carries the architecture kind and config, parameter names and
shapes (declaration order), and any run metadata supplied by the caller. The
parameter block is the little-endian concatenation of every parameter.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .fusion import FusionConfig, FusionNetwork, build_fusion_network
from .moe import ModalityMoe, MoeConfig, build_subset_model

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "build_from_header"]

MAGIC = b"DMCK"
_PREFIX = struct.Struct("<4sI")


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: ModalityMoe | FusionNetwork, path, meta: dict | None = None) -> None:
    named = list(model.named_parameters())
    header = {
        "format": 1,
        "kind": model.kind,
        "config": model.config.to_dict(),
        "params": [{"name": n, "shape": list(p.shape)} for n, p in named],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for _, p in named)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, len(blob)))
        fh.write(blob)
        fh.write(body)


def build_from_header(header: dict) -> ModalityMoe | FusionNetwork:
    kind = header.get("kind")
    if kind == "modality_moe":
        return build_subset_model(MoeConfig(**header["config"]))
    if kind == "fusion_net":
        return build_fusion_network(FusionConfig(**header["config"]))
    raise CheckpointError(f"unknown architecture kind {kind!r}")


def load_checkpoint(path) -> tuple[ModalityMoe | FusionNetwork, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError("file too short")
    magic, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from None
    model = build_from_header(header)
    named = list(model.named_parameters())
    declared = [(p["name"], tuple(p["shape"])) for p in header["params"]]
    if declared != [(n, p.shape) for n, p in named]:
        raise CheckpointError("parameter layout does not match the architecture in the header")
    total = sum(p.size for _, p in named)
    body = raw[_PREFIX.size + hlen:]
    if len(body) != 8 * total:
        raise CheckpointError(f"expected {8 * total} parameter bytes, found {len(body)}")
    flat = np.frombuffer(body, dtype="<f8")
    offset = 0
    for _, p in named:
        p.data[...] = flat[offset:offset + p.size].reshape(p.shape)
        offset += p.size
    return model, header
