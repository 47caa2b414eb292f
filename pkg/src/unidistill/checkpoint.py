"""Checkpoint container: manifest.json + one raw little-endian weight blob.

The manifest records every tensor's name, shape, dtype, and byte order,
plus an architecture descriptor and the build seed, so `load_model` can
reconstruct the module from scratch and verify the stored checksum. The
format is versioned; loading refuses unknown versions.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .data import TaskSpec
from .errors import IntegrityError, ConfigurationError
from . import models

FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
}


def describe_single_task(task: TaskSpec, channels: int) -> dict:
    return {"family": "single_task", "channels": channels, "task": task.to_dict()}


def describe_universal(tasks, channels: int, adapter: str) -> dict:
    return {
        "family": "universal",
        "channels": channels,
        "adapter": adapter,
        "tasks": [t.to_dict() for t in tasks],
    }


def _build_from_descriptor(desc: dict, seed: int) -> torch.nn.Module:
    family = desc.get("family")
    if family == "single_task":
        return models.build_single_task_model(
            TaskSpec.from_dict(desc["task"]), desc["channels"], seed
        )
    if family == "universal":
        return models.build_universal_model(
            [TaskSpec.from_dict(d) for d in desc["tasks"]],
            desc["channels"],
            seed,
            adapter=desc["adapter"],
        )
    if family == "encoder":
        return models.build_encoder(desc["mode"], desc["channels"], seed)
    raise IntegrityError(f"unknown model family in descriptor: {family!r}")


def save_model(model: torch.nn.Module, out_dir, descriptor: dict, seed: int) -> Path:
    """Write the model to `out_dir` (manifest.json + weights.bin)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    entries, chunks, offset = [], [], 0
    for name in sorted(state):
        t = state[name]
        if t.dtype not in _DTYPES:
            raise ConfigurationError(f"unsupported tensor dtype {t.dtype} for {name!r}")
        arr = np.ascontiguousarray(t.detach().cpu().numpy())
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(t.shape),
                "dtype": _DTYPES[t.dtype],
                "byte_order": "little",
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    (out / "weights.bin").write_bytes(b"".join(chunks))
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": int(seed),
        "descriptor": descriptor,
        "checksum": models.param_checksum(model),
        "tensors": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def read_manifest(ckpt_dir) -> dict:
    path = Path(ckpt_dir) / "manifest.json"
    if not path.exists():
        raise IntegrityError(f"no manifest.json under {ckpt_dir}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise IntegrityError(f"manifest.json is not valid JSON: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(
            f"unsupported checkpoint format_version: {manifest.get('format_version')!r}"
        )
    return manifest


def load_model(ckpt_dir) -> torch.nn.Module:
    """Rebuild the module from its descriptor and restore verified weights."""
    root = Path(ckpt_dir)
    manifest = read_manifest(root)
    blob_path = root / "weights.bin"
    if not blob_path.exists():
        raise IntegrityError(f"no weights.bin under {root}")
    blob = blob_path.read_bytes()

    model = _build_from_descriptor(manifest["descriptor"], manifest["seed"])
    state = model.state_dict()
    names = {e["name"] for e in manifest["tensors"]}
    if names != set(state):
        missing = sorted(set(state) - names)
        extra = sorted(names - set(state))
        raise IntegrityError(
            f"tensor set mismatch: missing {missing[:3]}, unexpected {extra[:3]}"
        )
    new_state = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise IntegrityError(f"weights.bin truncated at tensor {e['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        want = tuple(state[e["name"]].shape)
        if tuple(arr.shape) != want:
            raise IntegrityError(
                f"tensor {e['name']!r} has shape {arr.shape}, expected {want}"
            )
        new_state[e["name"]] = torch.from_numpy(arr)
    model.load_state_dict(new_state)
    if models.param_checksum(model) != manifest["checksum"]:
        raise IntegrityError(f"checksum mismatch for checkpoint {root}")
    return model


def stored_checksum(ckpt_dir) -> int:
    return read_manifest(ckpt_dir)["checksum"]
