"""Inpainting rollout, image metrics, robustness augmentations and the evaluation grid."""

from .augment import KINDS as AUGMENTATIONS, augment, max_inscribed_rect
from .harness import EvalReport, evaluate_pair, random_sign_perturbation, write_report
from .inpaint import inpaint, start_timestep, timestep_schedule
from .metrics import CallableAdapter, MetricAdapter, MetricPanel, UnavailableAdapter, metric_panel, psnr, ssim

__all__ = [
    "AUGMENTATIONS", "CallableAdapter", "EvalReport", "MetricAdapter", "MetricPanel", "UnavailableAdapter",
    "augment", "evaluate_pair", "inpaint", "max_inscribed_rect", "metric_panel", "psnr",
    "random_sign_perturbation", "ssim", "start_timestep", "timestep_schedule", "write_report",
]
