"""Ancestral inpainting sampler used for evaluation.

Denoising starts at ``t_start = round(strength * T)``. At strength 1 the initial latent is
pure noise; below 1 it is the image latent noised to ``t_start``. The mask and the masked
context latent condition every step. Steps are spaced evenly over ``[t_start, 0]`` and
each transition uses the DDPM posterior between the two (possibly non-adjacent)
timesteps, i.e. DDIM with ``eta = 1``.
"""

from __future__ import annotations

import numpy as np
import torch

from ..backend.base import InpaintingDenoiser
from ..errors import ValidationError
from ..masking import ContextImage, InpaintMask, make_context

MIN_STEPS, MAX_STEPS = 10, 100


def start_timestep(strength: float, max_timestep: int) -> int:
    if not 0.0 < strength <= 1.0:
        raise ValidationError(f"strength must lie in (0, 1], got {strength}")
    return int(round(strength * max_timestep))


def timestep_schedule(t_start: int, steps: int) -> list[int]:
    ts = np.unique(np.rint(np.linspace(t_start, 0, steps + 1)).astype(int))[::-1]
    return [int(t) for t in ts]


def inpaint(
    backend: InpaintingDenoiser,
    context: ContextImage,
    mask: InpaintMask,
    tau: torch.Tensor,
    strength: float = 1.0,
    steps: int = 50,
    seed: int = 0,
    return_latent: bool = False,
):
    """Inpaint the ``mask == 0`` region; returns pixels ``(3, H, W)``."""
    if not MIN_STEPS <= steps <= MAX_STEPS:
        raise ValidationError(f"steps must lie in [{MIN_STEPS}, {MAX_STEPS}], got {steps}")
    T = backend.spec.max_timestep
    t_start = start_timestep(strength, T)
    g = torch.Generator().manual_seed(int(seed))
    dtype = backend.dtype
    shape = (1, *backend.spec.latent_shape)

    def noise():
        return torch.randn(shape, generator=g, dtype=torch.float64).to(dtype)

    z0 = context.latent[None].to(dtype)
    C = make_context(context, mask)[None].to(dtype)
    M = mask.latent.to(dtype)
    tau = tau if tau.ndim == 3 else tau[None]
    clip = getattr(backend, "latent_clip", None)
    init = noise()
    z = init if t_start >= T else backend.add_noise(z0, t_start, init)
    ab = backend.schedule.alphas_cumprod
    with torch.no_grad():
        ts = timestep_schedule(t_start, steps)
        for t, t_prev in zip(ts[:-1], ts[1:]):
            eps = backend.forward(z, t, C, M, tau).eps_pred
            a_t, a_prev = float(ab[t]), float(ab[t_prev])
            x0 = (z - (1 - a_t) ** 0.5 * eps) / a_t**0.5
            if clip is not None:
                x0 = x0.clamp(-clip, clip)
            if t_prev == 0:
                z = x0
                break
            eps = (z - a_t**0.5 * x0) / (1 - a_t) ** 0.5
            var = (1 - a_prev) / (1 - a_t) * (1 - a_t / a_prev)
            z = a_prev**0.5 * x0 + max(1 - a_prev - var, 0.0) ** 0.5 * eps + var**0.5 * noise()
        pixels = backend.decode_image(z)[0]
    return (pixels, z) if return_latent else pixels
