"""End-to-end immunization: invert -> estimate centroid -> PGD ascent -> export.

Every run writes one ``manifest.json`` listing the resolved configuration (with the layer
each value came from), input hashes, seeds, per-stage timings and every artifact path
with its sha256. Artifacts written before a failing stage are kept.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attack import immunized_pixels, pgd_ascend
from .backend.base import InpaintingDenoiser
from .centroid import estimate_centroid, save_centroid
from .config import RunConfig, resolve_config
from .errors import DigressionError, StageError
from .inversion import invert
from .masking import load_pair, write_png

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
OUTPUT_ENV = "DIGRESSION_OUTPUT_DIR"


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def output_root(explicit: str | Path | None = None) -> Path:
    """``explicit`` if given, else ``$DIGRESSION_OUTPUT_DIR``, else ``./runs``."""
    if explicit is not None:
        return Path(explicit)
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


@dataclass
class RunManifest:
    command: str
    config: dict
    config_sources: dict
    inputs: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    backend: dict = field(default_factory=dict)
    status: str = "running"
    error: str | None = None
    version: int = MANIFEST_VERSION

    def add_artifact(self, name: str, path: str | Path) -> Path:
        path = Path(path)
        self.artifacts[name] = {"path": str(path), "sha256": file_sha256(path)}
        return path

    def to_dict(self) -> dict:
        return {
            "version": self.version, "command": self.command, "status": self.status, "error": self.error,
            "config": self.config, "config_sources": self.config_sources, "inputs": self.inputs,
            "seeds": self.seeds, "backend": self.backend, "timings": self.timings, "artifacts": self.artifacts,
        }

    def write(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    def hashes(self) -> dict:
        """Input and output hashes only (the part that must replay exactly)."""
        return {"inputs": self.inputs,
                "outputs": {k: v["sha256"] for k, v in self.artifacts.items() if v["sha256"] is not None}}


def new_manifest(command: str, cfg: RunConfig, backend: InpaintingDenoiser | None = None) -> RunManifest:
    m = RunManifest(command, cfg.flat(), dict(cfg.sources))
    if backend is not None:
        m.backend = {"spec": backend.spec.to_dict(), "class": type(backend).__name__,
                     "checkpoint": getattr(backend, "checkpoint_hash", None)}
    return m


class _Stage:
    def __init__(self, manifest: RunManifest, name: str):
        self.manifest, self.name = manifest, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.manifest.timings[self.name] = round(time.perf_counter() - self.t0, 6)
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def write_loss_csv(path: str | Path, losses, header=("step", "loss")) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])
    return path


def save_tensor(path: str | Path, x: torch.Tensor) -> Path:
    path = Path(path)
    np.save(path, x.detach().cpu().numpy())
    return path


@dataclass
class ImmunizeResult:
    out_dir: Path
    manifest: RunManifest
    immunized: torch.Tensor
    trace: object


def immunize(
    image_path: str | Path,
    mask_path: str | Path,
    config: RunConfig | None = None,
    backend: InpaintingDenoiser | None = None,
    out_dir: str | Path | None = None,
) -> ImmunizeResult:
    """Immunize one image against inpainting of its ``mask == 0`` region."""
    cfg = config or resolve_config()
    if backend is None:
        from .backend.checkpoint import load_bundled

        backend = load_bundled()
    out = Path(out_dir) if out_dir is not None else output_root() / Path(image_path).stem
    out.mkdir(parents=True, exist_ok=True)
    T = backend.spec.max_timestep
    manifest = new_manifest("immunize", cfg, backend)
    budget = cfg.budget()
    inv_cfg = cfg.inversion(T)
    cent = cfg.centroid()
    dist = cfg.timestep_dist(T)
    manifest.seeds = {"budget": budget.seed, "inversion": inv_cfg.seed, "centroid": cent["seed"]}
    try:
        with _Stage(manifest, "load"):
            context, mask = load_pair(image_path, mask_path, backend)
            manifest.inputs = {"image": {"path": str(image_path), "sha256": file_sha256(image_path)},
                               "mask": {"path": str(mask_path), "sha256": file_sha256(mask_path)}}
        with _Stage(manifest, "invert"):
            if cent["text"] == "null":
                tau = backend.null_embedding(inv_cfg.num_tokens)
                token_ids: list[int] | None = None
            else:
                inv = invert(backend, context, mask, inv_cfg)
                tau = inv.tau
                token_ids = list(inv.prompt.vocab_ids or [])
                manifest.add_artifact("pi", save_tensor(out / "pi.npy", inv.prompt.pi))
                manifest.add_artifact("inversion_loss", write_loss_csv(out / "inversion_loss.csv", inv.losses))
            (out / "tokens.json").write_text(json.dumps({"text": cent["text"], "token_ids": token_ids}))
            manifest.add_artifact("tokens", out / "tokens.json")
            manifest.add_artifact("tau", save_tensor(out / "tau.npy", tau))
        with _Stage(manifest, "centroid"):
            centroid = estimate_centroid(backend, context, mask, tau, dist, cent["n_samples"], seed=cent["seed"])
            stem = save_centroid(centroid, out / "centroid")
            manifest.add_artifact("centroid", stem.with_suffix(".npz"))
            manifest.add_artifact("centroid_meta", stem.with_suffix(".json"))
        with _Stage(manifest, "attack"):
            perturbation, trace = pgd_ascend(
                backend, context, mask, tau, centroid, budget, dist, recompute_centroid=cent["recompute"]
            )
            perturbation.check()
            manifest.add_artifact("delta", save_tensor(out / "delta.npy", perturbation.delta))
            trace.to_csv(out / "trace.csv")
            # trace.csv carries wall-clock seconds, so it is listed without entering the output hashes
            manifest.artifacts["trace"] = {"path": str(out / "trace.csv"), "sha256": None}
        with _Stage(manifest, "export"):
            pixels = immunized_pixels(context, perturbation)
            manifest.add_artifact("immunized", write_png(out / "immunized.png", pixels))
        manifest.status = "ok"
    except StageError as exc:
        manifest.status = "failed"
        manifest.error = str(exc)
        raise
    finally:
        manifest.write(out)
    return ImmunizeResult(out, manifest, pixels, trace)


def replay_hashes(manifest_path: str | Path) -> dict:
    data = json.loads(Path(manifest_path).read_text())
    return {"inputs": data["inputs"],
            "outputs": {k: v["sha256"] for k, v in data["artifacts"].items() if v["sha256"] is not None}}


__all__ = [
    "DigressionError", "ImmunizeResult", "MANIFEST_VERSION", "OUTPUT_ENV", "RunManifest", "file_sha256",
    "immunize", "new_manifest", "output_root", "replay_hashes", "save_tensor", "write_loss_csv",
]
