"""Discrete DDPM noise schedule.

Timesteps are indexed ``0..T``. Index 0 is the clean sample (``alpha_bar[0] == 1``)
and ``alpha_bar[t] = prod_{s=1..t} (1 - beta_s)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ContractViolation, TimestepRangeError


@dataclass(frozen=True)
class NoiseSchedule:
    num_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"

    def __post_init__(self):
        if self.num_timesteps < 1:
            raise ContractViolation("num_timesteps must be >= 1")
        if self.kind not in ("linear", "scaled_linear"):
            raise ContractViolation(f"unknown schedule kind {self.kind!r}")

    @property
    def betas(self) -> np.ndarray:
        """Betas for steps ``1..T``; ``betas[0]`` is a placeholder 0 for the clean index."""
        T = self.num_timesteps
        if self.kind == "linear":
            b = np.linspace(self.beta_start, self.beta_end, T, dtype=np.float64)
        else:
            b = np.linspace(self.beta_start**0.5, self.beta_end**0.5, T, dtype=np.float64) ** 2
        return np.concatenate([[0.0], b])

    @property
    def alphas_cumprod(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    def check_timestep(self, t) -> None:
        arr = np.asarray(t.detach().cpu() if torch.is_tensor(t) else t)
        if arr.size and (arr.min() < 0 or arr.max() > self.num_timesteps):
            raise TimestepRangeError(
                f"timestep(s) {arr.tolist()} outside [0, {self.num_timesteps}]"
            )

    def alpha_bar(self, t, like: torch.Tensor | None = None) -> torch.Tensor:
        self.check_timestep(t)
        idx = torch.as_tensor(t, dtype=torch.long)
        table = torch.as_tensor(self.alphas_cumprod)
        out = table[idx]
        if like is not None:
            out = out.to(dtype=like.dtype, device=like.device)
        return out

    def add_noise(self, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
        """``z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``; ``t`` scalar or one per batch row."""
        if z0.shape != eps.shape:
            raise ContractViolation(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
        ab = self.alpha_bar(t, like=z0)
        if ab.ndim == 1:
            ab = ab.view(-1, *([1] * (z0.ndim - 1)))
        return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps

    def to_dict(self) -> dict:
        return {
            "num_timesteps": self.num_timesteps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "kind": self.kind,
        }
