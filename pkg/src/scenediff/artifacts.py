"""Checkpoint containers and run manifests.

Checkpoints are self-describing: they echo the builder config, carry the
parameter blobs, the epoch counter and the torch RNG state. Manifests record
everything needed to reproduce a CLI run: command, config fingerprint, seed
and content hashes of all inputs and outputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import torch


def save_checkpoint(path, kind: str, model, cfg, epoch: int, extra: dict | None = None) -> None:
    payload = {
        "kind": kind,
        "config": dataclasses.asdict(cfg),
        "state_dict": model.state_dict(),
        "epoch": epoch,
        "rng_state": torch.get_rng_state(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def _load(path, kind: str) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != kind:
        raise ValueError(f"checkpoint {path} holds {payload.get('kind')!r}, expected {kind!r}")
    return payload


def load_vae_checkpoint(path):
    from .autoencoder import SceneVae, VaeConfig

    payload = _load(path, "vae")
    raw = dict(payload["config"])
    raw["widths"] = tuple(raw["widths"])
    raw["level_loss_weights"] = tuple(raw["level_loss_weights"])
    if raw.get("class_weights") is not None:
        raw["class_weights"] = tuple(raw["class_weights"])
    cfg = VaeConfig(**raw)
    model = SceneVae(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, cfg, payload["extra"]


def load_ddpm_checkpoint(path):
    from .diffusion import DiffusionConfig, LatentDdpm

    payload = _load(path, "ddpm")
    cfg = DiffusionConfig(**payload["config"])
    model = LatentDdpm(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, cfg, payload["extra"]


def load_segmenter_checkpoint(path):
    from .harness import SegmenterConfig, SegmenterNet

    payload = _load(path, "semseg")
    raw = dict(payload["config"])
    raw["widths"] = tuple(raw["widths"])
    raw["ignored_classes"] = frozenset(raw["ignored_classes"])
    cfg = SegmenterConfig(**raw)
    model = SegmenterNet(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, cfg, payload["extra"]


# ------------------------------- manifests -------------------------------

def sha256_path(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def hash_tree(path) -> dict:
    """Content hash per file under path (or of the single file)."""
    path = Path(path)
    if path.is_file():
        return {path.name: sha256_path(path)}
    return {
        str(p.relative_to(path)): sha256_path(p)
        for p in sorted(path.rglob("*"))
        if p.is_file() and not p.name.endswith(".manifest.json") and p.name != "manifest.json"
    }


def write_manifest(out_path, command: str, fingerprint: str, seed: int, inputs: dict, outputs: dict) -> dict:
    """inputs/outputs map a label to a file or directory path; every file gets
    a content hash."""
    manifest = {
        "command": command,
        "config_fingerprint": fingerprint,
        "seed": seed,
        "inputs": {str(k): hash_tree(v) for k, v in inputs.items()},
        "outputs": {str(k): hash_tree(v) for k, v in outputs.items()},
    }
    Path(out_path).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest
