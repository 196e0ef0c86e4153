"""Robustness augmentations applied to (immunized) images before inpainting.

Defaults: Gaussian noise with sigma 5 on the 0-255 scale, JPEG quality 80, color jitter
with brightness/contrast/saturation factors 1.1, and a 5 degree rotation followed by a
crop of the largest axis-aligned rectangle free of border fill, resized back to the
original size.
"""

from __future__ import annotations

import io
import math

import numpy as np
import torch
from PIL import Image

from ..errors import ValidationError
from ..masking import to_uint8

KINDS = ("gaussian_noise", "jpeg", "jitter", "rotate_crop")
DEFAULT_PARAMS = {
    "gaussian_noise": {"sigma": 5.0},
    "jpeg": {"quality": 80},
    "jitter": {"brightness": 1.1, "contrast": 1.1, "saturation": 1.1},
    "rotate_crop": {"degrees": 5.0},
}

_LUMA = np.array([0.299, 0.587, 0.114])


def _np(image) -> np.ndarray:
    if torch.is_tensor(image):
        return image.detach().cpu().to(torch.float64).numpy()
    return np.asarray(image, dtype=np.float64)


def _grayscale(x: np.ndarray) -> np.ndarray:
    return np.tensordot(_LUMA, x, axes=1)[None]


def gaussian_noise(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return np.clip(x + rng.normal(0.0, sigma / 255.0, size=x.shape), 0.0, 1.0)


def jpeg(x: np.ndarray, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(torch.from_numpy(x))).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    return np.asarray(Image.open(buf).convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0


def jitter(x: np.ndarray, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    x = np.clip(x * brightness, 0.0, 1.0)
    mean = _grayscale(x).mean()
    x = np.clip(mean + contrast * (x - mean), 0.0, 1.0)
    gray = _grayscale(x)
    return np.clip(gray + saturation * (x - gray), 0.0, 1.0)


def max_inscribed_rect(w: float, h: float, angle_rad: float) -> tuple[float, float]:
    """Largest axis-aligned rectangle inside a ``w x h`` rectangle rotated by ``angle_rad``."""
    if w <= 0 or h <= 0:
        return 0.0, 0.0
    wide = w >= h
    long_side, short_side = (w, h) if wide else (h, w)
    s, c = abs(math.sin(angle_rad)), abs(math.cos(angle_rad))
    if s < 1e-12:
        return float(w), float(h)
    if short_side <= 2.0 * s * c * long_side or abs(s - c) < 1e-10:
        half = 0.5 * short_side
        return (half / s, half / c) if wide else (half / c, half / s)
    cos2 = c * c - s * s
    return (w * c - h * s) / cos2, (h * c - w * s) / cos2


def rotate_crop(x: np.ndarray, degrees: float) -> np.ndarray:
    _, h, w = x.shape
    if degrees == 0:
        return x.copy()
    cw, ch = max_inscribed_rect(w, h, math.radians(degrees))
    cw, ch = int(math.floor(cw)), int(math.floor(ch))
    left, top = (w - cw) // 2, (h - ch) // 2
    out = []
    for channel in x:
        im = Image.fromarray(channel.astype(np.float32), mode="F")
        im = im.rotate(degrees, resample=Image.BILINEAR)
        im = im.crop((left, top, left + cw, top + ch)).resize((w, h), resample=Image.BILINEAR)
        out.append(np.asarray(im, dtype=np.float64))
    return np.clip(np.stack(out), 0.0, 1.0)


def augment(image, kind: str, params: dict | None = None, seed: int = 0) -> torch.Tensor:
    """Apply one augmentation to a ``(3, H, W)`` image in ``[0, 1]``."""
    if kind not in KINDS:
        raise ValidationError(f"unknown augmentation {kind!r}; expected one of {KINDS}")
    p = {**DEFAULT_PARAMS[kind], **(params or {})}
    x = _np(image)
    if kind == "gaussian_noise":
        y = gaussian_noise(x, p["sigma"], np.random.default_rng(seed))
    elif kind == "jpeg":
        y = jpeg(x, p["quality"])
    elif kind == "jitter":
        y = jitter(x, p["brightness"], p["contrast"], p["saturation"])
    else:
        y = rotate_crop(x, p["degrees"])
    return torch.from_numpy(y).float()
