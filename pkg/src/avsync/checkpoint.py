"""Checkpoint container.

A checkpoint is a NumPy ``.npz`` archive. Every entry except ``__meta__`` maps a
dot-separated parameter path (``backbone.context.blocks.0.attn.in_proj_weight``)
to its array. ``__meta__`` holds a UTF-8 JSON record with at least
``format_version`` and ``kind``; the rest (configs, checksums, vocabulary) is
kind-specific.
"""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np
import torch

from .errors import ArtifactIOError, MissingArtifactError

FORMAT_VERSION = 1
META_KEY = "__meta__"


def state_arrays(module: torch.nn.Module, prefix: str = "") -> Dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def checksum(arrays) -> str:
    """SHA-256 over (name, dtype, shape, bytes) of every array, in name order."""
    if isinstance(arrays, torch.nn.Module):
        arrays = state_arrays(arrays)
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(a.dtype.str.encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    meta = {"format_version": FORMAT_VERSION, **meta}
    if META_KEY in arrays:
        raise ValueError(f"{META_KEY} is reserved")
    buf = io.BytesIO()
    np.savez(buf, **{k: np.asarray(v) for k, v in arrays.items()},
             **{META_KEY: np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)})
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(buf.getvalue())
    except OSError as e:
        raise ArtifactIOError(f"cannot write checkpoint {path}: {e}") from e
    return path


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        if META_KEY not in z.files:
            raise ArtifactIOError(f"{path}: missing {META_KEY} record")
        meta = json.loads(z[META_KEY].tobytes().decode())
        arrays = {k: z[k] for k in z.files if k != META_KEY}
    if meta.get("format_version") != FORMAT_VERSION:
        raise ArtifactIOError(f"{path}: unsupported format_version {meta.get('format_version')}")
    return arrays, meta


def subset(arrays: Mapping[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    """Entries under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in arrays.items() if k.startswith(p)}


def load_into(module: torch.nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    ref = module.state_dict()
    state = {k: torch.from_numpy(np.asarray(v)).to(ref[k].dtype) if k in ref else torch.from_numpy(np.asarray(v))
             for k, v in arrays.items()}
    module.load_state_dict(state, strict=True)
