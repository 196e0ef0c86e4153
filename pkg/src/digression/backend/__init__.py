"""Denoiser backends: the abstract contract, the toy backend and its tooling."""

from .base import BackendSpec, DenoiserOutput, HiddenStateBundle, InpaintingDenoiser
from .checkpoint import bundled_checkpoint_path, load_bundled, load_checkpoint, save_checkpoint
from .schedule import NoiseSchedule
from .toy import ToyBackend, ToyConfig

__all__ = [
    "BackendSpec", "DenoiserOutput", "HiddenStateBundle", "InpaintingDenoiser",
    "NoiseSchedule", "ToyBackend", "ToyConfig",
    "bundled_checkpoint_path", "load_bundled", "load_checkpoint", "save_checkpoint",
]
