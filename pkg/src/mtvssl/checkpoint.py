"""Checkpoint container: JSON manifest plus named float32 arrays.

Layout (all integers little-endian)::

    magic   b"MTVC"
    u8      format version (currently 1)
    u32     manifest byte length, then that many UTF-8 JSON bytes
    u32     array count
    per array:
        u16     name byte length, then that many UTF-8 bytes
        u8      ndim
        u32*ndim  shape
        f32*prod(shape)  data, row-major

Array payloads are stored as 32-bit floats; loading restores them into the
caller's dtype. Reads are validated step by step so corruption is reported
with the byte offset at which it was detected.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"MTVC"
FORMAT_VERSION = 1


def _read_exact(f, count: int, what: str) -> bytes:
    offset = f.tell()
    data = f.read(count)
    if len(data) != count:
        raise CheckpointError(
            f"truncated checkpoint: wanted {count} bytes for {what}, got {len(data)}",
            offset=offset,
        )
    return data


def save_checkpoint(path: str | Path, manifest: dict, arrays: Mapping[str, np.ndarray]) -> Path:
    """Write a checkpoint file; arrays are stored sorted by name."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest)
    manifest.setdefault("format_version", FORMAT_VERSION)
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", FORMAT_VERSION))
        f.write(struct.pack("<I", len(manifest_bytes)))
        f.write(manifest_bytes)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype=np.float32)
            if arr.ndim > 0:
                arr = np.ascontiguousarray(arr)  # keeps 0-dim entries 0-dim
            name_bytes = name.encode("utf-8")
            if len(name_bytes) > 0xFFFF:
                raise CheckpointError(f"array name too long: {name[:40]}...")
            if arr.ndim > 0xFF:
                raise CheckpointError(f"array {name} has too many dimensions")
            f.write(struct.pack("<H", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes(order="C"))
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read back (manifest, arrays); raises CheckpointError with an offset on
    any malformed or truncated content."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
        (version,) = struct.unpack("<B", _read_exact(f, 1, "format version"))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {version}", offset=4)
        (manifest_len,) = struct.unpack("<I", _read_exact(f, 4, "manifest length"))
        manifest_offset = f.tell()
        try:
            manifest = json.loads(_read_exact(f, manifest_len, "manifest").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"manifest is not valid JSON: {exc}", offset=manifest_offset)
        (count,) = struct.unpack("<I", _read_exact(f, 4, "array count"))
        arrays: dict[str, np.ndarray] = {}
        for i in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, f"array {i} name length"))
            name = _read_exact(f, name_len, f"array {i} name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, f"{name}: ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, f"{name}: shape"))
            numel = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            data = _read_exact(f, 4 * numel, f"{name}: data")
            arrays[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
        trailing = f.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after final array", offset=f.tell() - 1)
    return manifest, arrays


def inspect_checkpoint(path: str | Path) -> dict:
    """Summary of a checkpoint: variant, step, parameter names/shapes, hash."""
    manifest, arrays = load_checkpoint(path)
    params = {
        name: list(arr.shape)
        for name, arr in sorted(arrays.items())
    }
    return {
        "path": str(path),
        "format_version": manifest.get("format_version"),
        "variant": manifest.get("variant"),
        "step": manifest.get("step"),
        "seed": manifest.get("seed"),
        "config_hash": manifest.get("config_hash"),
        "arrays": params,
        "total_parameters": int(sum(int(np.prod(s)) if s else 1 for s in params.values())),
    }


def state_dict_to_arrays(prefix: str, state_dict: Mapping[str, "object"]) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.{name}": tensor.detach().cpu().numpy()
        for name, tensor in state_dict.items()
    }


def arrays_to_state_dict(prefix: str, arrays: Mapping[str, np.ndarray], reference: Mapping) -> dict:
    """Select ``prefix.*`` arrays and validate names and shapes exactly
    against a reference state dict."""
    import torch

    selected = {
        name[len(prefix) + 1 :]: arr
        for name, arr in arrays.items()
        if name.startswith(prefix + ".")
    }
    want = set(reference.keys())
    have = set(selected.keys())
    if want != have:
        missing = sorted(want - have)
        unexpected = sorted(have - want)
        raise CheckpointError(
            f"{prefix}: parameter name sets differ "
            f"(missing={missing[:5]}, unexpected={unexpected[:5]})"
        )
    out = {}
    for name, ref in reference.items():
        arr = selected[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(
                f"{prefix}.{name}: shape {tuple(arr.shape)} does not match "
                f"model shape {tuple(ref.shape)}"
            )
        out[name] = torch.from_numpy(arr).to(ref.dtype)
    return out
