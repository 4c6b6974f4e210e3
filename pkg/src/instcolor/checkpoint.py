"""Parameter archives: a directory holding ``manifest.json`` and ``params.bin``.

``params.bin`` is every parameter tensor, in manifest order, as raw
little-endian float32. The manifest records names, shapes, offsets, the
architecture hash of the owning config and the sha256 of ``params.bin``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

FORMAT = "instcolor-archive/1"


class CheckpointError(RuntimeError):
    pass


def _named_tensors(module: nn.Module):
    return list(module.state_dict().items())


def parameter_bytes(module: nn.Module) -> bytes:
    return b"".join(
        t.detach().cpu().numpy().astype("<f4", copy=False).tobytes()
        for _, t in _named_tensors(module))


def parameter_hash(module: nn.Module) -> str:
    return hashlib.sha256(parameter_bytes(module)).hexdigest()


def save_archive(module: nn.Module, path, config_hash: str, meta: dict | None = None) -> str:
    """Write ``module``'s parameters to the archive directory ``path``; returns the data hash."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in _named_tensors(module):
        arr = t.detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    blob = b"".join(chunks)
    digest = hashlib.sha256(blob).hexdigest()
    (path / "params.bin").write_bytes(blob)
    manifest = {"format": FORMAT, "dtype": "float32", "byteorder": "little",
                "config_hash": config_hash, "data_sha256": digest, "params": entries,
                "meta": meta or {}}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return digest


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.is_file():
        raise CheckpointError(f"no archive manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable manifest {mpath}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{mpath}: unknown archive format {manifest.get('format')!r}")
    return manifest


def archive_hash(path) -> str:
    """sha256 of the archive's raw parameter data."""
    return hashlib.sha256((Path(path) / "params.bin").read_bytes()).hexdigest()


def load_archive(module: nn.Module, path, config_hash: str) -> dict:
    """Load an archive into ``module`` after checking the config hash and data hash."""
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.get("config_hash") != config_hash:
        raise CheckpointError(
            f"{path}: config hash mismatch (archive {manifest.get('config_hash')}, "
            f"expected {config_hash})")
    blob = (path / "params.bin").read_bytes() if (path / "params.bin").is_file() else b""
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest.get("data_sha256"):
        raise CheckpointError(
            f"{path}: data hash mismatch (manifest {manifest.get('data_sha256')}, "
            f"params.bin {digest})")
    data = np.frombuffer(blob, dtype="<f4")
    state = module.state_dict()
    names = [e["name"] for e in manifest["params"]]
    if sorted(names) != sorted(state):
        raise CheckpointError(f"{path}: parameter names do not match the module")
    new_state = {}
    for e in manifest["params"]:
        arr = data[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"])
        target = state[e["name"]]
        if tuple(arr.shape) != tuple(target.shape):
            raise CheckpointError(f"{path}: shape mismatch for {e['name']}")
        new_state[e["name"]] = torch.from_numpy(arr.copy()).to(target.dtype)
    module.load_state_dict(new_state)
    return manifest


def is_valid_archive(path) -> bool:
    try:
        manifest = read_manifest(path)
    except CheckpointError:
        return False
    return archive_hash(path) == manifest.get("data_sha256")
