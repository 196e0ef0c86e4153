"""Context construction, mask algebra and perturbation bookkeeping.

Mask convention throughout: 1 = context (kept), 0 = region to be inpainted.

Pixel masks are reduced to latent resolution by block voting: a latent cell is
context iff at least half of its ``f x f`` pixel footprint is context. The latent mask
is single-channel and broadcast across latent channels when building ``C = M * X``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import BudgetViolation, ValidationError

if TYPE_CHECKING:
    from .attack import AttackBudget
    from .backend.base import InpaintingDenoiser

BUDGET_TOL = 1e-9


def tensor_hash(*tensors: torch.Tensor) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().to(torch.float64).contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def downsample_mask(pixel_grid: torch.Tensor, factor: int) -> torch.Tensor:
    """``(..., 1, H, W)`` binary mask -> latent resolution by >= 50% context vote."""
    if factor == 1:
        return pixel_grid.clone()
    squeeze = pixel_grid.ndim == 3
    g = pixel_grid[None] if squeeze else pixel_grid
    votes = F.avg_pool2d(g.to(torch.float64), factor)
    out = (votes >= 0.5).to(pixel_grid.dtype)
    return out[0] if squeeze else out


@dataclass(frozen=True)
class InpaintMask:
    pixel_grid: torch.Tensor  # (1, H, W)
    grid: torch.Tensor        # (1, h, w)

    @classmethod
    def from_pixels(cls, pixel_grid: torch.Tensor, factor: int) -> "InpaintMask":
        if pixel_grid.ndim == 2:
            pixel_grid = pixel_grid[None]
        if pixel_grid.ndim != 3 or pixel_grid.shape[0] != 1:
            raise ValidationError(f"mask must be (1, H, W), got {tuple(pixel_grid.shape)}")
        values = torch.unique(pixel_grid)
        if not bool(((values == 0) | (values == 1)).all()):
            raise ValidationError("mask values must be binary {0, 1}")
        h, w = pixel_grid.shape[1:]
        if h % factor or w % factor:
            raise ValidationError(f"mask {h}x{w} not divisible by downsampling factor {factor}")
        pg = pixel_grid.float()
        return cls(pg, downsample_mask(pg, factor))

    @classmethod
    def full(cls, shape: tuple[int, int], factor: int, value: float = 1.0) -> "InpaintMask":
        return cls.from_pixels(torch.full((1, *shape), float(value)), factor)

    @property
    def latent(self) -> torch.Tensor:
        """Batched latent mask ``(1, 1, h, w)`` as consumed by backends."""
        return self.grid[None]

    @property
    def num_cells(self) -> int:
        return self.grid.numel()


def invert_mask(m: InpaintMask) -> InpaintMask:
    """Swap context and inpaint regions at both resolutions.

    The latent grid is flipped directly, so ``invert`` is an exact involution; at
    cells whose footprint is split exactly 50/50 the flipped grid deliberately differs
    from re-voting the flipped pixel mask.
    """
    return InpaintMask(1.0 - m.pixel_grid, 1.0 - m.grid)


@dataclass(frozen=True)
class ContextImage:
    pixels: torch.Tensor  # (3, H, W) in [0, 1]
    latent: torch.Tensor  # (c, h, w)
    source_path: str = ""

    @classmethod
    def from_pixels(
        cls, pixels: torch.Tensor, backend: "InpaintingDenoiser", source_path: str = ""
    ) -> "ContextImage":
        pixels = pixels.detach().to(backend.dtype)
        if pixels.ndim != 3 or pixels.shape[0] != 3:
            raise ValidationError(f"pixels must be (3, H, W), got {tuple(pixels.shape)}")
        if not torch.isfinite(pixels).all() or pixels.min() < 0 or pixels.max() > 1:
            raise ValidationError("pixels must lie in [0, 1]")
        with torch.no_grad():
            latent = backend.encode_image(pixels[None])[0]
        return cls(pixels, latent, source_path)

    @property
    def batched(self) -> torch.Tensor:
        return self.pixels[None]

    def digest(self) -> str:
        return tensor_hash(self.pixels)


def make_context(x: ContextImage, m: InpaintMask) -> torch.Tensor:
    """Masked latent ``C = M * X`` with the mask broadcast over latent channels."""
    if tuple(m.grid.shape[1:]) != tuple(x.latent.shape[1:]):
        raise ValidationError(
            f"mask resolution {tuple(m.grid.shape[1:])} != latent resolution {tuple(x.latent.shape[1:])}"
        )
    return m.grid.to(x.latent.dtype) * x.latent


def context_latent(backend: "InpaintingDenoiser", pixels: torch.Tensor, mask_grid: torch.Tensor) -> torch.Tensor:
    """Differentiable ``M * E(pixels)`` for batched pixels ``(B, 3, H, W)``."""
    z = backend.encode_image(pixels)
    return mask_grid.to(z.dtype).reshape(-1, 1, *z.shape[2:]) * z


@dataclass
class Perturbation:
    delta: torch.Tensor  # (3, H, W)
    budget: "AttackBudget"
    meta: dict = field(default_factory=dict)

    def linf(self) -> float:
        return float(self.delta.abs().max()) if self.delta.numel() else 0.0

    def l2(self) -> float:
        return float(self.delta.norm())

    def check(self) -> None:
        norm = getattr(self.budget, "norm", "linf")
        size = self.l2() if norm == "l2" else self.linf()
        if not np.isfinite(size) or size > self.budget.epsilon + BUDGET_TOL:
            raise BudgetViolation(
                f"perturbation {norm} norm {size:.6g} exceeds epsilon {self.budget.epsilon:.6g}"
            )


def apply_perturbation(
    x: ContextImage, p: Perturbation, backend: "InpaintingDenoiser"
) -> ContextImage:
    """Clamped ``x + delta`` with a freshly encoded latent; ``x`` is left untouched."""
    if p.delta.shape != x.pixels.shape:
        raise ValidationError(f"delta shape {tuple(p.delta.shape)} != pixel shape {tuple(x.pixels.shape)}")
    p.check()
    pixels = (x.pixels + p.delta.to(x.pixels.dtype)).clamp(0.0, 1.0)
    return ContextImage.from_pixels(pixels, backend, x.source_path)


# -- PNG I/O ------------------------------------------------------------------------

def read_image(path: str | Path) -> torch.Tensor:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).float().contiguous()


def read_mask(path: str | Path) -> torch.Tensor:
    """Single-channel PNG, 0 = inpaint, 255 = context -> ``(1, H, W)`` in {0, 1}."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"mask not found: {path}")
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.uint8)
    return torch.from_numpy((arr >= 128).astype(np.float32))[None]


def to_uint8(pixels: torch.Tensor) -> np.ndarray:
    arr = pixels.detach().cpu().to(torch.float64).clamp(0, 1).numpy()
    return np.rint(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_png(path: str | Path, pixels: torch.Tensor) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pixels)).save(path, format="PNG")
    return path


def write_mask_png(path: str | Path, m: InpaintMask) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = (m.pixel_grid[0].cpu().numpy() * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")
    return path


def load_pair(image_path, mask_path, backend: "InpaintingDenoiser") -> tuple[ContextImage, InpaintMask]:
    pixels = read_image(image_path)
    if tuple(pixels.shape) != tuple(backend.spec.pixel_shape):
        raise ValidationError(
            f"{image_path}: image shape {tuple(pixels.shape)} != backend pixel shape {backend.spec.pixel_shape}"
        )
    grid = read_mask(mask_path)
    if tuple(grid.shape[1:]) != tuple(pixels.shape[1:]):
        raise ValidationError(f"{mask_path}: mask size {tuple(grid.shape[1:])} != image size {tuple(pixels.shape[1:])}")
    x = ContextImage.from_pixels(pixels, backend, str(image_path))
    return x, InpaintMask.from_pixels(grid, backend.spec.downsample)
