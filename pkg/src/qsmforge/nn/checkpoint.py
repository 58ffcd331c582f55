"""Model checkpoints: ``manifest.json`` plus a little-endian f64 ``params.bin``.

The manifest lists every parameter with its dotted name, shape, element
offset and count into the blob, in model order. BatchNorm running
statistics are stored in the manifest as plain lists.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .models import Critic, CriticSpec, Generator, GeneratorSpec, build_critic, build_generator

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]

FORMAT = "qsmforge-ckpt-1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model, step: int = 0, optimizer: Optional[dict] = None, extra: Optional[dict] = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "count": int(p.size)})
        chunks.append(p.data.astype("<f8").ravel())
        offset += p.size
    kind = "generator" if isinstance(model, Generator) else "critic"
    manifest = {
        "format": FORMAT,
        "kind": kind,
        "spec": model.spec.to_dict(),
        "dtype": str(model.dtype),
        "step": int(step),
        "optimizer": optimizer or {},
        "parameters": entries,
        "buffers": {k: v.tolist() for k, v in model.named_buffers()},
        "extra": extra or {},
    }
    blob = np.concatenate(chunks) if chunks else np.zeros(0, "<f8")
    (path / "params.bin").write_bytes(blob.astype("<f8").tobytes())
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns ``(model, manifest)``."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = np.frombuffer((path / "params.bin").read_bytes(), dtype="<f8")
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown format {manifest.get('format')!r}")
    dtype = np.dtype(manifest.get("dtype", "float64"))
    if manifest["kind"] == "generator":
        model = build_generator(GeneratorSpec(**manifest["spec"]), dtype=dtype)
    else:
        model = build_critic(CriticSpec(**manifest["spec"]), dtype=dtype)
    state = {}
    for e in manifest["parameters"]:
        seg = blob[e["offset"]:e["offset"] + e["count"]]
        if seg.size != e["count"]:
            raise CheckpointError(f"{path}: blob too short for {e['name']}")
        state[e["name"]] = seg.reshape(e["shape"])
    for k, v in manifest["buffers"].items():
        state[k] = np.asarray(v, dtype=np.float64)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return model, manifest
