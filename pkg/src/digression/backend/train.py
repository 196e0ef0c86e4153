"""Desk-scale training of the toy inpainting backend on the procedural corpus.

The objective is the masked-context LDM loss: with ``z0 = E(x)``, a latent mask ``M``,
``C = M * z0`` and ``t ~ U{1..T}``, minimise ``||eps - eps_theta(z_t, t, C, M, tau)||^2``.
Captions are replaced by the all-zeros prompt with probability ``caption_dropout`` so the
null embedding stays meaningful.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..corpus import ToyCorpus
from ..errors import DivergenceError, ValidationError
from ..masking import downsample_mask
from .checkpoint import save_checkpoint
from .toy import ToyBackend, ToyConfig, ToyNet

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    backend: ToyBackend
    losses: list[float] = field(default_factory=list)
    checkpoint: Path | None = None


def _random_rect_masks(n: int, size: int, g: torch.Generator) -> torch.Tensor:
    m = torch.ones(n, 1, size, size)
    lo, hi = size // 8, size // 2
    for i in range(n):
        w, h = torch.randint(lo, hi + 1, (2,), generator=g).tolist()
        x0 = int(torch.randint(0, size - w + 1, (1,), generator=g))
        y0 = int(torch.randint(0, size - h + 1, (1,), generator=g))
        m[i, :, y0 : y0 + h, x0 : x0 + w] = 0.0
    return m


def train_toy_backend(
    corpus: ToyCorpus,
    steps: int,
    cfg: ToyConfig | None = None,
    batch_size: int = 16,
    lr: float = 1e-3,
    caption_dropout: float = 0.1,
    seed: int = 0,
    out: str | Path | None = None,
    log_every: int = 100,
) -> TrainResult:
    """Train from scratch; ``steps=0`` returns the initial weights untouched."""
    if len(corpus) < 256:
        raise ValidationError(f"training corpus needs >= 256 images, got {len(corpus)}")
    cfg = cfg or ToyConfig(seed=seed)
    net = ToyNet(cfg)
    losses: list[float] = []
    if steps > 0:
        net.train()
        opt = torch.optim.Adam(net.parameters(), lr=lr)
        g = torch.Generator().manual_seed(seed)
        probe = ToyBackend(cfg, net)  # shares parameters; used for encode_image only
        net.requires_grad_(True)
        T = cfg.num_timesteps
        for step in range(steps):
            idx = torch.randint(0, len(corpus), (batch_size,), generator=g)
            x = corpus.images[idx]
            pm = corpus.masks[idx].clone()
            swap = torch.rand(batch_size, generator=g) < 0.5
            if swap.any():
                pm[swap] = _random_rect_masks(int(swap.sum()), cfg.image_size, g)
            full = torch.rand(batch_size, generator=g) < 0.1
            pm[full] = 1.0
            with torch.no_grad():
                z0 = probe.encode_image(x)
            mask = downsample_mask(pm, cfg.downsample)
            context = mask * z0
            t = torch.randint(1, T + 1, (batch_size,), generator=g)
            eps = torch.randn(z0.shape, generator=g)
            z_t = probe.schedule.add_noise(z0, t, eps)
            pi = net.text.token_embedding(corpus.captions[idx])
            drop = torch.rand(batch_size, generator=g) < caption_dropout
            pi = torch.where(drop[:, None, None], torch.zeros_like(pi), pi)
            tau = net.text(pi)
            eps_pred, _ = net.unet(z_t, t, context, mask, tau)
            loss = F.mse_loss(eps_pred, eps)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at step {step}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(net.parameters(), 1.0)
            opt.step()
            losses.append(float(loss.detach()))
            if log_every and step % log_every == 0:
                log.info("step %d loss %.4f", step, losses[-1])
    backend = ToyBackend(cfg, net)
    ckpt = None
    if out is not None:
        ckpt = save_checkpoint(
            backend, out, {"training": {"steps": steps, "batch_size": batch_size, "lr": lr,
                                        "caption_dropout": caption_dropout, "seed": seed,
                                        "corpus_size": len(corpus)}}
        )
        with open(ckpt.with_name(ckpt.name + "_loss.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            w.writerows(enumerate(losses))
    return TrainResult(backend, losses, ckpt)


def smoothed(losses: list[float], window: int = 50) -> np.ndarray:
    """Trailing moving average, used for the start/finish loss comparison."""
    arr = np.asarray(losses, dtype=np.float64)
    if len(arr) < window:
        return arr
    c = np.cumsum(np.concatenate([[0.0], arr]))
    return (c[window:] - c[:-window]) / window
