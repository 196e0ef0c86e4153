"""Monte Carlo estimate of the hidden-state centroid of a clean context.

For fixed ``(C, M, tau)`` the centroid is the per-layer mean of self-attention outputs
over ``z_T ~ N(0, I)`` and ``t`` drawn from the attack's timestep distribution. It is
estimated once on the clean image and then frozen as the digression target.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .backend.base import HiddenStateBundle, InpaintingDenoiser
from .errors import ContractViolation, StageError, ValidationError
from .masking import ContextImage, InpaintMask, make_context, tensor_hash
from .timesteps import TimestepDistribution, latent_noise, sample_timestep


@dataclass(frozen=True)
class SemanticCentroid:
    means: tuple[tuple[str, torch.Tensor], ...]      # layer -> (D,) float64
    variances: tuple[tuple[str, torch.Tensor], ...]  # layer -> (D,) unbiased sample variance
    sample_count: int
    config_hash: str
    context_hash: str = ""
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValidationError("centroid needs at least one sample")
        for _, m in self.means:
            if not torch.isfinite(m).all():
                raise ValidationError("centroid contains non-finite values")

    @property
    def layer_ids(self) -> list[str]:
        return [n for n, _ in self.means]

    def mean(self, layer: str) -> torch.Tensor:
        return dict(self.means)[layer]

    def variance(self, layer: str) -> torch.Tensor:
        return dict(self.variances)[layer]

    def standard_error(self, layer: str) -> float:
        """RMS over coordinates of the per-coordinate standard error of the mean."""
        return float(torch.sqrt(self.variance(layer).mean() / self.sample_count))

    def as_bundle(self, dtype: torch.dtype = torch.float64) -> HiddenStateBundle:
        return HiddenStateBundle([(n, m.to(dtype)[None]) for n, m in self.means])


def draw_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2**62, size=n)]


def sample_draw(sample_seed: int, dist: TimestepDistribution, latent_shape, dtype) -> tuple[int, torch.Tensor]:
    """``(t, z_T)`` for one Monte Carlo sample, a pure function of ``sample_seed``."""
    t = sample_timestep(dist, np.random.default_rng(sample_seed))
    return t, latent_noise(sample_seed, (1, *latent_shape), dtype)


def _hash_config(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def estimate_centroid(
    backend: InpaintingDenoiser,
    context: ContextImage,
    mask: InpaintMask,
    tau: torch.Tensor,
    dist: TimestepDistribution | None = None,
    n_samples: int = 32,
    seed: int = 0,
    sample_seeds: Sequence[int] | None = None,
    layers: Sequence[str] | None = None,
    chunk: int = 16,
) -> SemanticCentroid:
    """Average hidden states over ``n_samples`` draws of ``(z_T, t)``.

    ``context`` must be the clean image. ``sample_seeds`` overrides the per-sample seeds
    normally derived from ``seed`` (repeating a seed repeats the draw exactly).
    """
    dist = dist or TimestepDistribution.for_backend(backend.spec.max_timestep)
    if sample_seeds is None:
        if n_samples < 1:
            raise ValidationError("n_samples must be >= 1")
        sample_seeds = draw_seeds(seed, n_samples)
    sample_seeds = [int(s) for s in sample_seeds]
    n = len(sample_seeds)
    if n < 1:
        raise ValidationError("n_samples must be >= 1")
    C = make_context(context, mask)[None]
    M = mask.latent.to(C.dtype)
    tau = tau if tau.ndim == 3 else tau[None]
    rows: dict[str, list[torch.Tensor]] = {}
    try:
        with torch.no_grad():
            for start in range(0, n, chunk):
                part = sample_seeds[start : start + chunk]
                draws = [sample_draw(s, dist, backend.spec.latent_shape, backend.dtype) for s in part]
                ts = torch.tensor([t for t, _ in draws])
                z = torch.cat([z for _, z in draws])
                out = backend.forward(z, ts, C, M, tau, layers=layers)
                for name, v in out.hidden:
                    rows.setdefault(name, []).append(v.to(torch.float64))
    except Exception as exc:  # partial sums are discarded
        raise StageError("centroid", exc) from exc
    means, variances = [], []
    for name, chunks in rows.items():
        stacked = torch.cat(chunks)
        mu = stacked.sum(dim=0) / n
        var = ((stacked - mu) ** 2).sum(dim=0) / (n - 1) if n > 1 else torch.zeros_like(mu)
        means.append((name, mu))
        variances.append((name, var))
    meta = {
        "n_samples": n,
        "dist": dist.to_dict(),
        "seed": seed,
        "sample_seeds": sample_seeds,
        "layers": list(rows),
        "tau_hash": tensor_hash(tau),
    }
    return SemanticCentroid(
        tuple(means), tuple(variances), n, _hash_config(meta),
        context_hash=context_hash(context, mask), meta=meta,
    )


def context_hash(context: ContextImage, mask: InpaintMask) -> str:
    return tensor_hash(context.pixels, mask.pixel_grid)


def centroid_distance(
    centroid: SemanticCentroid | HiddenStateBundle,
    bundle: HiddenStateBundle,
    layer_weights: Mapping[str, float] | None = None,
) -> torch.Tensor:
    """``sum_i w_i ||phi_i - H_i||^2`` per batch row of ``bundle`` -> ``(B,)`` tensor.

    Layers are those of the centroid; every one must be present in ``bundle`` with a
    matching feature size.
    """
    targets = centroid.means if isinstance(centroid, SemanticCentroid) else centroid.entries
    weights = dict(layer_weights or {})
    unknown = set(weights) - {n for n, _ in targets}
    if unknown:
        raise ContractViolation(f"weights given for unknown layers {sorted(unknown)}")
    total = None
    for name, target in targets:
        try:
            h = bundle[name]
        except KeyError:
            raise ContractViolation(f"bundle lacks layer {name!r}") from None
        target = target.reshape(1, -1) if target.ndim == 1 else target
        if target.shape[-1] != h.shape[-1]:
            raise ContractViolation(f"layer {name!r}: feature size {h.shape[-1]} != {target.shape[-1]}")
        w = weights.get(name, 1.0)
        if w == 0.0:
            continue
        term = w * (target.to(h.dtype) - h).pow(2).sum(dim=-1)
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(bundle.entries[0][1].shape[0], dtype=bundle.entries[0][1].dtype)
    return total


def save_centroid(centroid: SemanticCentroid, path: str | Path) -> Path:
    stem = Path(path)
    stem = stem.with_suffix("") if stem.suffix in (".npz", ".json") else stem
    stem.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"mean/{n}": m.numpy() for n, m in centroid.means}
    arrays.update({f"var/{n}": v.numpy() for n, v in centroid.variances})
    with open(stem.with_suffix(".npz"), "wb") as fh:
        np.savez(fh, **arrays)
    sidecar = {
        "sample_count": centroid.sample_count,
        "config_hash": centroid.config_hash,
        "context_hash": centroid.context_hash,
        "layers": centroid.layer_ids,
        **dict(centroid.meta),
    }
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return stem


def load_centroid(path: str | Path) -> SemanticCentroid:
    stem = Path(path)
    stem = stem.with_suffix("") if stem.suffix in (".npz", ".json") else stem
    meta = json.loads(stem.with_suffix(".json").read_text())
    with np.load(stem.with_suffix(".npz")) as data:
        means = tuple((n, torch.from_numpy(data[f"mean/{n}"].copy())) for n in meta["layers"])
        variances = tuple((n, torch.from_numpy(data[f"var/{n}"].copy())) for n in meta["layers"])
    extra = {k: v for k, v in meta.items() if k not in ("sample_count", "config_hash", "context_hash")}
    return SemanticCentroid(means, variances, meta["sample_count"], meta["config_hash"], meta["context_hash"], extra)
