"""Vulnerable-timestep analysis and the timestep sampling distribution.

The attack, the centroid and the token inversion all draw ``t`` from a clamped,
rounded normal centred in the early (high-noise) part of the reverse process. The
eigenfeature analysis supports choosing that window: for each attention layer, the
first principal component of hidden states across timesteps is compared (by cosine
similarity) with the hidden state at every timestep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .backend.base import HiddenStateBundle, InpaintingDenoiser
from .errors import ValidationError

DEFAULT_MEAN = 720.0
DEFAULT_STD = 5.8


@dataclass(frozen=True)
class TimestepDistribution:
    mean: float = DEFAULT_MEAN
    std: float = DEFAULT_STD
    clamp_range: tuple[int, int] = (1, 1000)

    def __post_init__(self):
        if not self.std > 0:
            raise ValidationError("timestep std must be > 0")
        lo, hi = self.clamp_range
        if not 1 <= lo <= hi:
            raise ValidationError(f"invalid clamp range {self.clamp_range}")

    @classmethod
    def for_backend(cls, max_timestep: int, mean_fraction: float = 0.72, std: float = DEFAULT_STD):
        """Window at ``mean_fraction * T``; equals N(720, 5.8) on [1, 1000] for T = 1000."""
        return cls(mean_fraction * max_timestep, std, (1, max_timestep))

    def sample(self, rng: np.random.Generator, size: int | None = None):
        return sample_timestep(self, rng, size)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "clamp_range": list(self.clamp_range)}


def sample_timestep(dist: TimestepDistribution, rng: np.random.Generator, size: int | None = None):
    """``round(N(mean, std))`` clamped to ``clamp_range``; an int, or an array if ``size`` given."""
    draw = rng.normal(dist.mean, dist.std, size=size)
    t = np.clip(np.rint(draw), *dist.clamp_range).astype(np.int64)
    return int(t) if size is None else t


def latent_noise(seed: int, shape: Sequence[int], dtype=torch.float32) -> torch.Tensor:
    """Standard-normal latent drawn from its own seeded generator."""
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(tuple(shape), generator=g, dtype=torch.float64).to(dtype)


def collect_hidden_trajectory(
    backend: InpaintingDenoiser,
    context: torch.Tensor,
    mask: torch.Tensor,
    tau: torch.Tensor,
    t_grid: Sequence[int],
    seeds: int | Sequence[int],
) -> list[HiddenStateBundle]:
    """One bundle per ``(seed, t)``; a single ``z_T`` per seed is reused across ``t_grid``.

    ``context`` and ``mask`` are batched latent tensors ``(1, c, h, w)`` / ``(1, 1, h, w)``.
    Bundles are ordered seed-major.
    """
    T = backend.spec.max_timestep
    t_grid = [int(t) for t in t_grid]
    if not t_grid or min(t_grid) < 1 or max(t_grid) > T:
        raise ValidationError(f"t_grid must be a nonempty subset of [1, {T}]")
    seed_list = list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds]
    out = []
    with torch.no_grad():
        for s in seed_list:
            z_T = latent_noise(s, (1, *backend.spec.latent_shape), backend.dtype)
            batch = z_T.expand(len(t_grid), *z_T.shape[1:])
            res = backend.forward(batch, torch.tensor(t_grid), context, mask, tau)
            for i, t in enumerate(t_grid):
                b = res.hidden.row(i)
                b.timestep = t
                b.provenance["noise_seed"] = s
                out.append(b)
    return out


@dataclass
class EigenfeatureReport:
    timesteps: list[int]
    components: dict[str, np.ndarray]   # layer -> unit PC1 (first example)
    curves: dict[str, np.ndarray]       # layer -> cosine per timestep, averaged over examples
    degenerate: dict[str, bool]
    window: tuple[int, int] | None = None
    explained_variance: dict[str, float] = field(default_factory=dict)

    def rows(self):
        """``(t, layer, cosine)`` triples in timestep-major order."""
        for i, t in enumerate(self.timesteps):
            for layer, curve in self.curves.items():
                yield t, layer, float(curve[i])


def first_component(states: np.ndarray) -> tuple[np.ndarray, float, bool]:
    """Unit first principal component of rows of ``states`` (mean-centred over rows).

    Returns ``(pc1, explained_variance, degenerate)``. The sign is fixed so that the raw
    states project non-negatively in sum, ties broken by the first row.
    """
    x = np.asarray(states, dtype=np.float64)
    centred = x - x.mean(axis=0, keepdims=True)
    scale = np.abs(centred).max()
    if scale == 0.0 or scale <= 1e-12 * max(np.abs(x).max(), 1e-300):
        return np.zeros(x.shape[1]), 0.0, True
    _, s, vt = np.linalg.svd(centred / scale, full_matrices=False)
    pc = vt[0] / np.linalg.norm(vt[0])
    proj = x @ pc
    total = proj.sum()
    if total < -1e-12 * np.abs(proj).sum() or (abs(total) <= 1e-12 * np.abs(proj).sum() and proj[0] < 0):
        pc = -pc
    var = float((s[0] * scale) ** 2 / len(x))
    return pc, var, False


def _cosine(rows: np.ndarray, v: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1) * np.linalg.norm(v)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = (rows @ v) / norms
    return np.clip(np.nan_to_num(cos, nan=0.0), -1.0, 1.0)


def eigenfeature_similarity(
    bundles: Sequence[HiddenStateBundle],
    layers: Sequence[str] | None = None,
    window: tuple[int, int] | None = None,
) -> EigenfeatureReport:
    """PC1 of hidden states across timesteps and its cosine with each timestep's state.

    Bundles are grouped into examples by ``provenance['noise_seed']`` (or
    ``provenance['example']`` when present); curves are averaged across examples.
    """
    if not bundles:
        raise ValidationError("no bundles given")
    groups: dict = {}
    for b in bundles:
        key = b.provenance.get("example", b.provenance.get("noise_seed", 0))
        groups.setdefault(key, []).append(b)
    layer_ids = list(layers) if layers is not None else bundles[0].layer_ids
    timesteps = None
    curves: dict[str, list[np.ndarray]] = {l: [] for l in layer_ids}
    components: dict[str, np.ndarray] = {}
    degenerate = {l: False for l in layer_ids}
    explained: dict[str, float] = {}
    for key in sorted(groups, key=str):
        group = sorted(groups[key], key=lambda b: b.timestep)
        ts = [int(b.timestep) for b in group]
        if len(set(ts)) < 2:
            raise ValidationError("eigenfeature analysis needs at least 2 timesteps per example")
        if timesteps is None:
            timesteps = ts
        elif ts != timesteps:
            raise ValidationError("all examples must share the same timestep grid")
        for layer in layer_ids:
            states = np.stack([b[layer].detach().cpu().double().reshape(-1).numpy() for b in group])
            pc, var, degen = first_component(states)
            if degen:
                degenerate[layer] = True
                curves[layer].append(np.ones(len(ts)))
            else:
                curves[layer].append(_cosine(states, pc))
            components.setdefault(layer, pc)
            explained.setdefault(layer, var)
    return EigenfeatureReport(
        timesteps=timesteps,
        components=components,
        curves={l: np.mean(c, axis=0) for l, c in curves.items()},
        degenerate=degenerate,
        window=window,
        explained_variance=explained,
    )


def extreme_resolution_layers(backend: InpaintingDenoiser) -> list[str]:
    """Attention layers at the finest and coarsest resolutions (first match of each)."""
    spec = backend.spec
    if not spec.layer_resolutions:
        return list(spec.attention_layer_ids)
    res = dict(zip(spec.attention_layer_ids, spec.layer_resolutions))
    finest = max(res.values())
    coarsest = min(res.values())
    fine = next(l for l, r in res.items() if r == finest)
    coarse = next(l for l, r in res.items() if r == coarsest)
    return [fine] if fine == coarse else [fine, coarse]
