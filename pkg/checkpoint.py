"""
SFUS parameter checkpoints.

Layout (little-endian):
  b"SFUS", version u32, then until EOF one record per parameter:
    name-length u32, name utf-8, rank u32, dims u64[rank], float32 payload

A JSON sidecar next to the checkpoint (same stem, ".json") carries the model
kind, its config and, for fusion heads, the content hashes of the frozen
encoder checkpoints they were trained against.
"""

import hashlib
import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"SFUS"
VERSION = 1


def write_checkpoint(path, state: Dict[str, np.ndarray]) -> str:
    """Write parameters as float32; returns the sha256 of the written file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, values in state.items():
        encoded = name.encode("utf-8")
        values = np.asarray(values)
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", values.ndim))
        chunks.append(struct.pack(f"<{values.ndim}Q", *values.shape))
        chunks.append(values.astype("<f4").tobytes())
    blob = b"".join(chunks)
    path.write_bytes(blob)
    logger.debug(f"[CKPT] wrote {len(state)} tensors to {path}")
    return hashlib.sha256(blob).hexdigest()


def read_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    """Read a checkpoint back into float64 arrays (exact float32 values)."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path} is not an SFUS checkpoint")
    if len(blob) < 8 or struct.unpack_from("<I", blob, 4)[0] != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version")

    state = OrderedDict()
    offset = 8
    try:
        while offset < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, offset)
            offset += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = 4 * count
            if offset + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated payload for '{name}'")
            values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            offset += nbytes
            state[name] = values.astype(np.float64).reshape(dims)
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt record ({e})")
    return state


def file_sha256(path) -> str:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    return hashlib.sha256(path.read_bytes()).hexdigest()


def state_hash(state: Dict[str, np.ndarray]) -> str:
    """Hash of parameter names and their float32 values, independent of any file."""
    digest = hashlib.sha256()
    for name, values in state.items():
        digest.update(name.encode("utf-8"))
        digest.update(np.asarray(values).astype("<f4").tobytes())
    return digest.hexdigest()


# ============================================
# SIDECAR METADATA
# ============================================

def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_sidecar(path, meta: Dict[str, Any]):
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


def read_sidecar(path) -> Dict[str, Any]:
    meta_path = sidecar_path(path)
    if not meta_path.is_file():
        raise CheckpointError(f"Checkpoint metadata not found: {meta_path}")
    try:
        return json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Checkpoint metadata {meta_path} is not valid JSON: {e}")


def verify_encoder_hashes(meta: Dict[str, Any], encoder_paths: Dict[str, Optional[str]]):
    """Fail if a fusion head is loaded against encoders other than the ones it was trained on."""
    expected = meta.get("encoder_hashes", {})
    for role, enc_path in encoder_paths.items():
        if role not in expected:
            continue
        actual = file_sha256(enc_path)
        if actual != expected[role]:
            raise CheckpointError(
                f"{role} encoder {enc_path} does not match the checkpoint it was fused with "
                f"(expected {expected[role][:12]}, got {actual[:12]})"
            )
