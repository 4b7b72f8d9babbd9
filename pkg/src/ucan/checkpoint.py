"""Versioned named-tensor files for checkpoints and audit dumps.

Layout: 8 magic bytes, little-endian u32 format version, little-endian u32
header length, UTF-8 JSON header, then raw little-endian float32 data for
each tensor in header order.
"""

import json
import logging
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np
import torch

from ucan.errors import CheckpointError
from ucan.model import AdapterModel, ModelConfig

logger = logging.getLogger(__name__)

MAGIC = b"UCANTNSR"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sII")


def encode_tensors(tensors: dict[str, torch.Tensor], meta: dict[str, Any]) -> bytes:
    """Serialise named tensors and metadata to bytes.

    Args:
        tensors: Ordered mapping of name to tensor; stored as float32.
        meta: JSON-serialisable metadata.

    Returns:
        The encoded file contents.
    """
    entries = []
    blobs = []
    for name, tensor in tensors.items():
        array = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
        entries.append({"name": name, "shape": list(array.shape), "dtype": "float32"})
        blobs.append(array.astype("<f4", copy=False).tobytes())
    header = json.dumps(
        {"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    return _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(blobs)


def _entry(raw: Any) -> tuple[str, tuple[int, ...]]:
    name, shape = raw["name"], tuple(raw["shape"])
    if not isinstance(name, str) or not all(
        isinstance(n, int) and n >= 0 for n in shape
    ):
        raise ValueError(f"bad tensor entry {raw!r}")
    return name, shape


def decode_tensors(
    payload: bytes, source: str = "<bytes>"
) -> tuple[dict[str, torch.Tensor], dict]:
    """Inverse of :func:`encode_tensors`.

    Raises:
        CheckpointError: On bad magic, unknown version or truncation.
    """
    if len(payload) < _PREAMBLE.size:
        raise CheckpointError(f"{source}: truncated preamble")
    magic, version, header_len = _PREAMBLE.unpack_from(payload)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a tensor file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{source}: format version {version}, expected {FORMAT_VERSION}"
        )
    start = _PREAMBLE.size
    if len(payload) < start + header_len:
        raise CheckpointError(f"{source}: truncated header")
    try:
        header = json.loads(payload[start : start + header_len].decode("utf-8"))
        entries = [_entry(raw) for raw in header["tensors"]]
        meta = header["meta"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(
            f"{source}: corrupted header (version {version})"
        ) from exc

    offset = start + header_len
    tensors = {}
    for name, shape in entries:
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if len(payload) < offset + nbytes:
            raise CheckpointError(f"{source}: truncated data for {name}")
        array = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset)
        array = array.astype(np.float32).reshape(shape)
        tensors[name] = torch.from_numpy(array)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{source}: {len(payload) - offset} trailing bytes")
    return tensors, meta


def save_tensors(
    path: Path, tensors: dict[str, torch.Tensor], meta: dict[str, Any]
) -> None:
    """Write named tensors to ``path``."""
    Path(path).write_bytes(encode_tensors(tensors, meta))


def load_tensors(path: Path) -> tuple[dict[str, torch.Tensor], dict]:
    """Read named tensors from ``path``.

    Raises:
        CheckpointError: If the file is missing or unreadable.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: does not exist")
    return decode_tensors(path.read_bytes(), str(path))


def save_checkpoint(model: AdapterModel, path: Path) -> None:
    """Write a model, its shape and its lineage to ``path``."""
    meta = {
        "kind": "adapter-model",
        "model": asdict(model.config),
        "lineage": model.lineage,
    }
    save_tensors(path, dict(model.state_dict()), meta)
    logger.info("Saved checkpoint %s", path)


def load_checkpoint(path: Path) -> AdapterModel:
    """Read a model written by :func:`save_checkpoint`.

    Raises:
        CheckpointError: If the file is not a model checkpoint.
    """
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "adapter-model":
        raise CheckpointError(f"{path}: not a model checkpoint")
    try:
        config = ModelConfig(**meta["model"])
        model = AdapterModel(config)
        model.load_state_dict(tensors)
    except (TypeError, KeyError, RuntimeError) as exc:
        raise CheckpointError(f"{path}: tensors do not match the model header") from exc
    model.lineage = dict(meta.get("lineage", {}))
    model.eval()
    return model
