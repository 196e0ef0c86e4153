"""Toy checkpoint format: ``<stem>.npz`` tensor dump + ``<stem>.json`` sidecar."""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from ..errors import ValidationError
from .toy import ToyBackend, ToyConfig, ToyNet

FORMAT_VERSION = 1


def _stem(path: str | Path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".npz", ".json") else p


def save_checkpoint(backend: ToyBackend, path: str | Path, extra: dict | None = None) -> Path:
    """Write ``<stem>.npz`` and ``<stem>.json``; returns the stem."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().numpy() for k, v in backend.net.state_dict().items()}
    with open(stem.with_suffix(".npz"), "wb") as fh:
        np.savez(fh, **state)
    sidecar = {
        "format_version": FORMAT_VERSION,
        "backend_spec": backend.spec.to_dict(),
        "toy_config": backend.cfg.to_dict(),
        "schedule": backend.schedule.to_dict(),
        "seed": backend.cfg.seed,
        "dtype": str(backend.dtype).replace("torch.", ""),
    }
    if extra:
        sidecar.update(extra)
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return stem


def load_checkpoint(path: str | Path) -> ToyBackend:
    stem = _stem(path)
    meta_path, tensor_path = stem.with_suffix(".json"), stem.with_suffix(".npz")
    for p in (meta_path, tensor_path):
        if not p.is_file():
            raise FileNotFoundError(f"checkpoint file missing: {p}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint format {meta.get('format_version')!r}")
    cfg = ToyConfig(**meta["toy_config"])
    net = ToyNet(cfg)
    with np.load(tensor_path) as data:
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files}
    net.load_state_dict(state)
    backend = ToyBackend(cfg, net)
    backend.checkpoint_hash = hashlib.sha256(tensor_path.read_bytes()).hexdigest()
    return backend


def bundled_checkpoint_path() -> Path:
    return Path(str(resources.files("digression") / "data" / "toy_backend"))


def load_bundled() -> ToyBackend:
    """The pretrained toy backend shipped with the package."""
    return load_checkpoint(bundled_checkpoint_path())
