"""Checkpoint container and content checksums.

Each checkpoint is a safetensors file (little-endian arrays with declared
dtypes and shapes) whose metadata records a format version, the checkpoint
kind and the constructor config needed to rebuild the module.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch
from safetensors.torch import load_file, safe_open, save_file

from .errors import MissingCheckpointError

FORMAT_VERSION = "1"

CODEC_FILE = "codec.safetensors"
AUX_FILE = "aux_decoder.safetensors"
PRIOR_FILE = "prior.safetensors"
ADAPTER_FILE = "adapter.safetensors"


def file_checksum(path) -> bytes:
    """First 8 bytes of the SHA-256 of the file contents."""
    return hashlib.sha256(Path(path).read_bytes()).digest()[:8]


def bundle_checksum(*paths) -> bytes:
    h = hashlib.sha256()
    for p in paths:
        h.update(file_checksum(p))
    return h.digest()[:8]


def state_checksum(module: torch.nn.Module) -> str:
    """Hash of a module's parameters and buffers (in-memory freeze check)."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_module(module: torch.nn.Module, path, kind: str, config: dict | None = None,
                extra: dict | None = None) -> bytes:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().cpu().contiguous().clone() for k, v in module.state_dict().items()}
    meta = {
        "format": "gdcodec",
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": json.dumps(config or {}, sort_keys=True),
    }
    for k, v in (extra or {}).items():
        meta[k] = str(v)
    save_file(tensors, str(path), metadata=meta)
    return file_checksum(path)


def read_metadata(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpointError(f"checkpoint not found: {path}")
    with safe_open(str(path), framework="pt") as f:
        meta = dict(f.metadata() or {})
    if meta.get("format") != "gdcodec":
        raise ValueError(f"{path} is not a gdcodec checkpoint")
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    meta["config"] = json.loads(meta.get("config", "{}"))
    return meta


def load_into(module: torch.nn.Module, path, kind: str) -> dict:
    meta = read_metadata(path)
    if meta["kind"] != kind:
        raise ValueError(f"{path} holds a {meta['kind']!r} checkpoint, expected {kind!r}")
    module.load_state_dict(load_file(str(path)))
    return meta
