"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CAUS1"
    u32 config length, config JSON (UTF-8, sorted keys)
    u32 group count
    per group: u16 name length, name, u8 ndim, u32 dims..., f64 values
    32-byte SHA-256 of everything above
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import CausalModel, ModelConfig

MAGIC = b"CAUS1"
DIGEST_BYTES = 32


def encode(groups: dict[str, np.ndarray], config: dict) -> bytes:
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(groups))]
    for name, value in groups.items():
        value = np.asarray(value, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(value.astype("<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < len(MAGIC) + DIGEST_BYTES or not blob.startswith(MAGIC):
        raise CheckpointError("not a checkpoint (bad magic)")
    body, digest = blob[:-DIGEST_BYTES], blob[-DIGEST_BYTES:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch; checkpoint is corrupt")
    try:
        pos = len(MAGIC)
        (cfg_len,) = struct.unpack_from("<I", body, pos)
        pos += 4
        config = json.loads(body[pos : pos + cfg_len].decode("utf-8"))
        pos += cfg_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        groups: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            groups[name] = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
        if pos != len(body):
            raise ValueError("trailing bytes after last group")
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    return groups, config


def save(path, model: CausalModel, run_config: dict | None = None) -> bytes:
    blob = encode(model.state_dict(), {"model": model.cfg.to_dict(), "run": run_config or {}})
    Path(path).write_bytes(blob)
    return blob


def load(path) -> tuple[CausalModel, dict]:
    """Rebuild the model described by the checkpoint's config echo."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    groups, config = decode(blob)
    try:
        model_cfg = ModelConfig(**config["model"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: config echo lacks a valid model section ({exc})") from None
    model = CausalModel(model_cfg)
    model.load_state_dict(groups)
    return model, config
