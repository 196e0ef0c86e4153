"""Image immunization against diffusion inpainting by hidden-state digression."""

from .attack import AttackBudget, AttackTrace, digression_loss, digression_step, pgd_ascend, targeted_baseline
from .backend import BackendSpec, HiddenStateBundle, InpaintingDenoiser, NoiseSchedule, ToyBackend, ToyConfig
from .centroid import SemanticCentroid, centroid_distance, estimate_centroid, load_centroid, save_centroid
from .config import RunConfig, resolve_config
from .errors import (
    BudgetViolation, ContractViolation, DigressionError, DivergenceError, StageError, TimestepRangeError,
    ValidationError,
)
from .inversion import InversionConfig, TokenPrompt, invert, inversion_loss, project_tokens
from .masking import ContextImage, InpaintMask, Perturbation, invert_mask, load_pair, make_context
from .pipeline import immunize
from .timesteps import TimestepDistribution, eigenfeature_similarity, sample_timestep

__version__ = "0.1.0"

__all__ = [
    "AttackBudget", "AttackTrace", "BackendSpec", "BudgetViolation", "ContextImage", "ContractViolation",
    "DigressionError", "DivergenceError", "HiddenStateBundle", "InpaintMask", "InpaintingDenoiser",
    "InversionConfig", "NoiseSchedule", "Perturbation", "RunConfig", "SemanticCentroid", "StageError",
    "TimestepDistribution", "TimestepRangeError", "TokenPrompt", "ToyBackend", "ToyConfig", "ValidationError",
    "centroid_distance", "digression_loss", "digression_step", "eigenfeature_similarity", "estimate_centroid",
    "immunize", "inversion_loss", "invert", "invert_mask", "load_centroid", "load_pair", "make_context",
    "pgd_ascend", "project_tokens", "resolve_config", "sample_timestep", "save_centroid", "targeted_baseline",
]
