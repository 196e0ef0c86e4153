"""Procedural toy corpus: flat-shaded shapes on plain or gradient backgrounds.

Every image comes with an inpainting mask (PNG, 0 = inpaint, 255 = context) and a
caption of attribute token ids, so the toy text encoder has something real to learn.

On-disk layout::

    corpus/
      images/0000.png ...
      masks/0000.png ...
      captions.json      {"num_tokens": 8, "captions": {"0000": [ids...], ...}}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import torch
from PIL import Image

PAD = 0
OBJECT_COLORS = {
    "red": (220, 40, 40), "green": (40, 180, 60), "blue": (40, 70, 220), "yellow": (235, 210, 40),
    "cyan": (40, 200, 210), "magenta": (200, 50, 190), "white": (245, 245, 245), "black": (25, 25, 25),
}
SHAPES = ("circle", "square", "triangle", "diamond")
POSITIONS = ("top_left", "top_right", "bottom_left", "bottom_right", "center")
SIZES = ("small", "large")
BACKGROUNDS = {
    "sand": (200, 180, 140), "sky": (140, 180, 220), "grass": (120, 170, 110),
    "slate": (90, 100, 120), "rose": (210, 160, 170), "ash": (160, 160, 160),
}
BG_STYLES = ("solid", "gradient")


def _build_vocab() -> dict[str, int]:
    names = (
        [f"obj_{c}" for c in OBJECT_COLORS] + list(SHAPES) + list(POSITIONS) + list(SIZES)
        + [f"bg_{b}" for b in BACKGROUNDS] + list(BG_STYLES)
    )
    return {name: i + 1 for i, name in enumerate(names)}


TOKEN_IDS = _build_vocab()
CAPTION_TOKENS = 8


@dataclass
class ToyCorpus:
    images: torch.Tensor    # (N, 3, H, W) float in [0, 1]
    masks: torch.Tensor     # (N, 1, H, W) float in {0, 1}, 1 = context
    captions: torch.Tensor  # (N, CAPTION_TOKENS) long
    names: list[str]

    def __len__(self) -> int:
        return len(self.names)


def _shape_mask(kind: str, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if kind == "circle":
        return dx**2 + dy**2 <= r**2
    if kind == "square":
        return (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    # upward triangle
    return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)


def _position(name: str, size: int, rng: np.random.Generator) -> tuple[float, float]:
    q = size / 4
    base = {
        "top_left": (q, q), "top_right": (3 * q, q), "bottom_left": (q, 3 * q),
        "bottom_right": (3 * q, 3 * q), "center": (2 * q, 2 * q),
    }[name]
    jitter = rng.uniform(-size / 16, size / 16, 2)
    return base[0] + jitter[0], base[1] + jitter[1]


def render_sample(rng: np.random.Generator, size: int = 64):
    """One ``(image uint8 HxWx3, mask uint8 HxW, caption ids)`` triple."""
    bg = list(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))]
    style = BG_STYLES[rng.integers(2)]
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = BACKGROUNDS[bg]
    if style == "gradient":
        ramp = np.linspace(-40, 40, size)[:, None, None]
        img = img + ramp
    caption = [TOKEN_IDS[f"bg_{bg}"], TOKEN_IDS[style]]

    n_obj = 1 + int(rng.random() < 0.5)
    positions = rng.choice(len(POSITIONS), size=n_obj, replace=False)
    first_box = None
    for k in range(n_obj):
        color = list(OBJECT_COLORS)[rng.integers(len(OBJECT_COLORS))]
        shape = SHAPES[rng.integers(len(SHAPES))]
        pos = POSITIONS[positions[k]]
        sz = SIZES[rng.integers(2)]
        r = size * (0.12 if sz == "small" else 0.2) * rng.uniform(0.9, 1.1)
        cx, cy = _position(pos, size, rng)
        img[_shape_mask(shape, cx, cy, r, size)] = OBJECT_COLORS[color]
        if k == 0:
            caption += [TOKEN_IDS[sz], TOKEN_IDS[f"obj_{color}"], TOKEN_IDS[shape], TOKEN_IDS[pos]]
            first_box = (cx, cy, r)
        else:
            caption += [TOKEN_IDS[f"obj_{color}"], TOKEN_IDS[shape]]
    caption += [PAD] * (CAPTION_TOKENS - len(caption))

    mask = np.full((size, size), 255, dtype=np.uint8)
    if rng.random() < 0.5:
        cx, cy, r = first_box
        half = r * rng.uniform(1.1, 1.5)
    else:
        cx, cy = rng.uniform(size * 0.25, size * 0.75, 2)
        half = rng.uniform(size * 0.12, size * 0.3)
    x0, x1 = int(max(0, cx - half)), int(min(size, cx + half))
    y0, y1 = int(max(0, cy - half)), int(min(size, cy + half))
    mask[y0:y1, x0:x1] = 0
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask, caption


def generate_corpus(out_dir: str | Path, n: int = 512, seed: int = 0, size: int = 64) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    captions = {}
    for i in range(n):
        img, mask, cap = render_sample(rng, size)
        name = f"{i:04d}"
        Image.fromarray(img).save(out / "images" / f"{name}.png")
        Image.fromarray(mask).save(out / "masks" / f"{name}.png")
        captions[name] = cap
    meta = {"num_tokens": CAPTION_TOKENS, "seed": seed, "size": size, "vocab": TOKEN_IDS, "captions": captions}
    (out / "captions.json").write_text(json.dumps(meta, indent=1))
    return out


def bundled_corpus_dir() -> Path:
    return Path(str(resources.files("digression") / "data" / "toy_corpus"))


def load_corpus(path: str | Path | None = None, limit: int | None = None) -> ToyCorpus:
    root = Path(path) if path is not None else bundled_corpus_dir()
    meta = json.loads((root / "captions.json").read_text())
    names = sorted(meta["captions"])[:limit]
    images, masks, caps = [], [], []
    for name in names:
        images.append(np.asarray(Image.open(root / "images" / f"{name}.png").convert("RGB")))
        masks.append(np.asarray(Image.open(root / "masks" / f"{name}.png").convert("L")))
        caps.append(meta["captions"][name])
    x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float() / 255.0
    m = (torch.from_numpy(np.stack(masks)).float() / 255.0 >= 0.5).float()[:, None]
    return ToyCorpus(x, m, torch.tensor(caps, dtype=torch.long), names)
