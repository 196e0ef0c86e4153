"""The inpainting-denoiser contract consumed by every other module.

A backend exposes four differentiable maps:

* ``encode_image``: pixels ``(B, 3, H, W)`` in ``[0, 1]`` -> latent ``(B, c, h, w)``
* ``encode_text``: token embeddings ``(B, L, D)`` -> text embedding ``(B, L, D')``
* ``forward``: ``(z_t, t, masked latent C, latent mask M, tau)`` -> predicted noise
  plus the self-attention outputs captured during that single pass
* ``decode_image``: latent -> pixels

All tensors carry a leading batch dimension.
"""

from __future__ import annotations

import hashlib
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import torch

from ..errors import ContractViolation, ValidationError
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class BackendSpec:
    latent_shape: tuple[int, int, int]
    pixel_shape: tuple[int, int, int]
    max_timestep: int
    vocab_size: int
    embed_dim: int
    attention_layer_ids: tuple[str, ...]
    # spatial side length of each attention layer, same order as attention_layer_ids
    layer_resolutions: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.attention_layer_ids:
            raise ContractViolation("attention_layer_ids must be nonempty")
        c, h, w = self.latent_shape
        pc, ph, pw = self.pixel_shape
        if pc != 3:
            raise ContractViolation("pixel tensors must have 3 channels")
        if ph % h or pw % w or ph // h != pw // w:
            raise ContractViolation(
                f"latent {self.latent_shape} does not evenly downsample pixels {self.pixel_shape}"
            )
        if self.layer_resolutions and len(self.layer_resolutions) != len(self.attention_layer_ids):
            raise ContractViolation("layer_resolutions must align with attention_layer_ids")

    @property
    def downsample(self) -> int:
        return self.pixel_shape[1] // self.latent_shape[1]

    def to_dict(self) -> dict:
        return {
            "latent_shape": list(self.latent_shape),
            "pixel_shape": list(self.pixel_shape),
            "max_timestep": self.max_timestep,
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "attention_layer_ids": list(self.attention_layer_ids),
            "layer_resolutions": list(self.layer_resolutions),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackendSpec":
        return cls(
            latent_shape=tuple(d["latent_shape"]),
            pixel_shape=tuple(d["pixel_shape"]),
            max_timestep=int(d["max_timestep"]),
            vocab_size=int(d["vocab_size"]),
            embed_dim=int(d["embed_dim"]),
            attention_layer_ids=tuple(d["attention_layer_ids"]),
            layer_resolutions=tuple(d.get("layer_resolutions", ())),
        )


@dataclass
class HiddenStateBundle:
    """Ordered self-attention outputs from one denoiser pass.

    Each entry is ``(layer_id, tensor)`` with the tensor flattened to ``(B, D_layer)``.
    """

    entries: list[tuple[str, torch.Tensor]]
    timestep: int | list[int] | None = None
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[str, torch.Tensor]]:
        return iter(self.entries)

    def __getitem__(self, layer_id: str) -> torch.Tensor:
        for name, value in self.entries:
            if name == layer_id:
                return value
        raise KeyError(layer_id)

    @property
    def layer_ids(self) -> list[str]:
        return [name for name, _ in self.entries]

    def select(self, layer_ids: Sequence[str] | None) -> "HiddenStateBundle":
        if layer_ids is None:
            return self
        missing = set(layer_ids) - set(self.layer_ids)
        if missing:
            raise ContractViolation(f"unknown attention layers {sorted(missing)}")
        keep = [(n, v) for n, v in self.entries if n in set(layer_ids)]
        return HiddenStateBundle(keep, self.timestep, dict(self.provenance))

    def detach(self) -> "HiddenStateBundle":
        return HiddenStateBundle(
            [(n, v.detach()) for n, v in self.entries], self.timestep, dict(self.provenance)
        )

    def row(self, i: int) -> "HiddenStateBundle":
        """Single batch row ``i`` as a bundle with batch size 1."""
        t = self.timestep[i] if isinstance(self.timestep, list) else self.timestep
        return HiddenStateBundle(
            [(n, v[i : i + 1]) for n, v in self.entries], t, dict(self.provenance)
        )

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for _, v in self.entries)

    def equal(self, other: "HiddenStateBundle") -> bool:
        """Bitwise equality of layer ids and values."""
        if self.layer_ids != other.layer_ids:
            return False
        return all(torch.equal(a, b) for (_, a), (_, b) in zip(self.entries, other.entries))


@dataclass
class DenoiserOutput:
    eps_pred: torch.Tensor
    hidden: HiddenStateBundle


def conditioning_hash(*tensors: torch.Tensor) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


class InpaintingDenoiser(ABC):
    """Abstract inpainting backend. Instances are immutable after construction."""

    spec: BackendSpec
    schedule: NoiseSchedule

    @abstractmethod
    def forward(
        self,
        z_t: torch.Tensor,
        t,
        context: torch.Tensor,
        mask: torch.Tensor,
        tau: torch.Tensor,
        layers: Sequence[str] | None = None,
    ) -> DenoiserOutput:
        """Predict noise and capture self-attention outputs for one timestep.

        ``context`` is the masked latent ``C = M * z0`` and ``mask`` the latent-resolution
        mask ``(B, 1, h, w)`` with 1 marking context.
        """

    @abstractmethod
    def encode_text(self, pi: torch.Tensor) -> torch.Tensor:
        """Token embeddings ``(B, L, embed_dim)`` -> text embedding."""

    @abstractmethod
    def encode_image(self, x: torch.Tensor) -> torch.Tensor: ...

    @abstractmethod
    def decode_image(self, z: torch.Tensor) -> torch.Tensor: ...

    @abstractmethod
    def token_table(self) -> torch.Tensor:
        """Vocabulary embedding table ``(vocab_size, embed_dim)``."""

    def null_embedding(self, num_tokens: int) -> torch.Tensor:
        """Text embedding of the all-zeros prompt, shape ``(1, L, D')``."""
        table = self.token_table()
        return self.encode_text(torch.zeros(1, num_tokens, table.shape[1], dtype=table.dtype))

    def add_noise(self, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
        return self.schedule.add_noise(z0, t, eps)

    @property
    def dtype(self) -> torch.dtype:
        return self.token_table().dtype

    # -- shared validation helpers -------------------------------------------------

    def _check_pixels(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.spec.pixel_shape):
            raise ContractViolation(
                f"pixel tensor shape {tuple(x.shape)} != (B, {self.spec.pixel_shape})"
            )
        if not torch.isfinite(x).all() or x.min() < 0.0 or x.max() > 1.0:
            raise ValidationError("pixels must be finite and lie in [0, 1]")

    def _check_latent(self, z: torch.Tensor, name: str) -> None:
        if z.ndim != 4 or tuple(z.shape[1:]) != tuple(self.spec.latent_shape):
            raise ContractViolation(
                f"{name} shape {tuple(z.shape)} != (B, {self.spec.latent_shape})"
            )

    def _check_mask(self, m: torch.Tensor) -> None:
        _, h, w = self.spec.latent_shape
        if m.ndim != 4 or tuple(m.shape[1:]) != (1, h, w):
            raise ContractViolation(f"latent mask shape {tuple(m.shape)} != (B, 1, {h}, {w})")

    def _check_tokens(self, pi: torch.Tensor) -> None:
        if pi.ndim != 3 or pi.shape[-1] != self.spec.embed_dim:
            raise ContractViolation(
                f"token embeddings shape {tuple(pi.shape)} != (B, L, {self.spec.embed_dim})"
            )
