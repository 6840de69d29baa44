"""Checkpoint files: one raw little-endian float32 blob plus a JSON manifest.

The manifest lists each tensor's name, shape and byte offset inside the blob,
together with the network config, epoch, seed and loss history. The blob's
SHA-256 is recorded so fine-tuned checkpoints can name their parent.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from ..errors import StateError
from .api import SegmentationModel, SynthesisModel
from .networks import NetworkConfig

FORMAT = "cranisynth-checkpoint"
VERSION = 1
_KINDS = {"synthesis": SynthesisModel, "segmentation": SegmentationModel}


def _paths(path):
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".bin"), path.with_name(path.name + ".json")


def save_checkpoint(model, path, epoch, loss_history=(), parent=None, tag=None, extra=None):
    """Write ``model`` weights; returns the blob's SHA-256 hex digest."""
    blob_path, manifest_path = _paths(path)
    blob_path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    digest = hashlib.sha256(blob).hexdigest()
    blob_path.write_bytes(blob)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "kind": model.kind,
        "config": model.cfg.to_dict(),
        "epoch": int(epoch),
        "seed": int(model.cfg.seed),
        "loss_history": [_clean(x) for x in loss_history],
        "tensors": entries,
        "sha256": digest,
        "parent_sha256": parent,
        "tag": tag,
        "extra": extra or {},
    }
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return digest


def _clean(entry):
    if isinstance(entry, dict):
        return {k: _clean(v) for k, v in entry.items()}
    if isinstance(entry, (np.floating, float)):
        return float(entry)
    return entry


def read_manifest(path):
    _, manifest_path = _paths(path)
    if not manifest_path.exists():
        raise StateError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise StateError(f"{manifest_path}: not a version-{VERSION} checkpoint")
    return manifest


def load_checkpoint(path):
    """Rebuild the model recorded at ``path``; returns (model, manifest)."""
    blob_path, _ = _paths(path)
    manifest = read_manifest(path)
    if not blob_path.exists():
        raise StateError(f"checkpoint blob missing: {blob_path}")
    blob = blob_path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise StateError(f"{blob_path}: checksum mismatch")
    model = _KINDS[manifest["kind"]](NetworkConfig.from_dict(manifest["config"]))
    state = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        state[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    model.load_state_dict(state)
    model.trained = True
    return model, manifest
