"""Native SSIM/PSNR plus an adapter slot for deep metrics.

SSIM follows Wang et al. (2004) with an 11x11 Gaussian window (sigma 1.5), constants
``K1 = 0.01``, ``K2 = 0.03``, data range 1, population covariances, statistics computed
only where the window fits inside the image, averaged over channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol

import numpy as np
import torch

from ..errors import ValidationError

PSNR_CAP = 100.0
DEEP_METRICS = ("lpips", "clip_score", "fid", "kid", "aesthetic", "pickscore")


def _as_array(img) -> np.ndarray:
    if torch.is_tensor(img):
        img = img.detach().cpu().to(torch.float64).numpy()
    return np.asarray(img, dtype=np.float64)


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValidationError("images must be (C, H, W) or (H, W)")
    return a, b


def gaussian_kernel(sigma: float = 1.5, radius: int = 5) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2-D array with 1-D kernel ``k``."""
    n = len(k)
    h, w = img.shape
    rows = sum(k[i] * img[i : h - n + 1 + i, :] for i in range(n))
    return sum(k[j] * rows[:, j : w - n + 1 + j] for j in range(n))


def ssim(a, b, data_range: float = 1.0) -> float:
    a, b = _check_pair(a, b)
    k = gaussian_kernel()
    if min(a.shape[1:]) < len(k):
        raise ValidationError("images smaller than the 11x11 SSIM window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    vals = []
    for x, y in zip(a, b):
        mx, my = _filter_valid(x, k), _filter_valid(y, k)
        sxx = _filter_valid(x * x, k) - mx * mx
        syy = _filter_valid(y * y, k) - my * my
        sxy = _filter_valid(x * y, k) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


def psnr(a, b, data_range: float = 1.0, cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio in dB, capped at ``cap`` (identical inputs give ``cap``)."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(data_range**2 / mse))


class MetricAdapter(Protocol):
    name: str

    def available(self) -> bool: ...

    def __call__(self, a, b) -> float: ...


@dataclass
class UnavailableAdapter:
    """Placeholder for metrics needing pretrained networks that are not installed."""

    name: str

    def available(self) -> bool:
        return False

    def __call__(self, a, b) -> float:
        raise RuntimeError(f"metric {self.name!r} is unavailable")


@dataclass
class CallableAdapter:
    name: str
    fn: Callable[[object, object], float]

    def available(self) -> bool:
        return True

    def __call__(self, a, b) -> float:
        return float(self.fn(a, b))


def default_adapters() -> dict[str, MetricAdapter]:
    return {name: UnavailableAdapter(name) for name in DEEP_METRICS}


@dataclass
class MetricPanel:
    ssim: float
    psnr: float
    extras: dict[str, float | None] = field(default_factory=dict)
    available: dict[str, bool] = field(default_factory=dict)

    def as_row(self) -> dict:
        row = {"ssim": self.ssim, "psnr": self.psnr}
        row.update({k: v for k, v in self.extras.items()})
        return row


def metric_panel(a, b, adapters: Mapping[str, MetricAdapter] | None = None) -> MetricPanel:
    adapters = default_adapters() if adapters is None else adapters
    extras: dict[str, float | None] = {}
    available: dict[str, bool] = {}
    for name, adapter in adapters.items():
        ok = adapter.available()
        available[name] = ok
        extras[name] = adapter(a, b) if ok else None
    return MetricPanel(ssim(a, b), psnr(a, b), extras, available)
