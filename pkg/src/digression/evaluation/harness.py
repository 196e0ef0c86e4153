"""Disruption evaluation: oracle vs disrupted inpainting over a strength/seed/aug grid.

The oracle inpainting uses the clean context; the disrupted one uses the immunized
context with the same seed, prompt and strength. For augmented rows both images pass
through the same augmentation (same seed) before inpainting.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from ..backend.base import InpaintingDenoiser
from ..errors import ValidationError
from ..masking import ContextImage, InpaintMask
from .augment import KINDS, augment
from .inpaint import inpaint
from .metrics import DEEP_METRICS, MetricAdapter, metric_panel

STRENGTHS = (0.8, 0.9, 1.0)


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        """Mean SSIM/PSNR per ``(strength, aug)`` key, sorted."""
        groups: dict[tuple, list[dict]] = {}
        for r in self.rows:
            groups.setdefault((r["strength"], r["aug"]), []).append(r)
        out = {}
        for (strength, aug), rows in sorted(groups.items()):
            out[f"{strength}/{aug}"] = {
                "strength": strength,
                "aug": aug,
                "n": len(rows),
                "ssim": float(np.mean([r["ssim"] for r in rows])),
                "psnr": float(np.mean([r["psnr"] for r in rows])),
            }
        return out

    def mean(self, metric: str, strength: float | None = None, aug: str | None = "none") -> float:
        sel = [r[metric] for r in self.rows
               if (strength is None or r["strength"] == strength) and (aug is None or r["aug"] == aug)]
        return float(np.mean(sel))


def evaluate_pair(
    backend: InpaintingDenoiser,
    clean: ContextImage,
    immunized: ContextImage,
    mask: InpaintMask,
    tau: torch.Tensor,
    strengths: Sequence[float] = STRENGTHS,
    seeds: Sequence[int] = (0, 1, 2, 3),
    augmentations: Sequence[str] = (),
    steps: int = 50,
    image_id: str = "image",
    adapters: Mapping[str, MetricAdapter] | None = None,
) -> EvalReport:
    if clean.pixels.shape != immunized.pixels.shape:
        raise ValidationError("clean and immunized images differ in shape")
    for a in augmentations:
        if a not in KINDS:
            raise ValidationError(f"unknown augmentation {a!r}")
    report = EvalReport()
    for strength in strengths:
        for seed in seeds:
            for aug in ("none", *augmentations):
                if aug == "none":
                    c, d = clean, immunized
                else:
                    c = ContextImage.from_pixels(augment(clean.pixels, aug, seed=seed), backend)
                    d = ContextImage.from_pixels(augment(immunized.pixels, aug, seed=seed), backend)
                oracle = inpaint(backend, c, mask, tau, strength, steps, seed)
                disrupted = inpaint(backend, d, mask, tau, strength, steps, seed)
                panel = metric_panel(oracle, disrupted, adapters)
                row = {"image_id": image_id, "strength": float(strength), "seed": int(seed), "aug": aug}
                row.update(panel.as_row())
                report.rows.append(row)
    report.rows.sort(key=lambda r: (r["image_id"], r["strength"], r["seed"], r["aug"]))
    return report


def random_sign_perturbation(context: ContextImage, epsilon: float, seed: int) -> torch.Tensor:
    """Control perturbation: uniform random signs at full L-infinity budget."""
    g = torch.Generator().manual_seed(int(seed))
    signs = torch.randint(0, 2, context.pixels.shape, generator=g, dtype=torch.int64) * 2 - 1
    x = context.pixels.to(torch.float64)
    return (x + epsilon * signs).clamp(0.0, 1.0)


def write_report(report: EvalReport, out_dir: str | Path, plot: bool = True) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["image_id", "strength", "seed", "aug", "ssim", "psnr", *DEEP_METRICS]
    csv_path = out / "evaluation.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in report.rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in cols})
    json_path = out / "summary.json"
    json_path.write_text(json.dumps(report.summary(), indent=2))
    paths = {"csv": csv_path, "summary": json_path}
    if plot and report.rows:
        paths["plot"] = _plot(report, out / "summary.png")
    return paths


def _plot(report: EvalReport, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    summary = report.summary()
    augs = sorted({v["aug"] for v in summary.values()}, key=lambda a: (a != "none", a))
    strengths = sorted({v["strength"] for v in summary.values()})
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(len(augs), 1)
    for i, aug in enumerate(augs):
        ys = [summary.get(f"{s}/{aug}", {}).get("ssim", np.nan) for s in strengths]
        ax.bar(np.arange(len(strengths)) + i * width, ys, width, label=aug)
    ax.set_xticks(np.arange(len(strengths)) + width * (len(augs) - 1) / 2)
    ax.set_xticklabels([f"{s:g}" for s in strengths])
    ax.set_xlabel("inpainting strength")
    ax.set_ylabel("SSIM(oracle, disrupted)")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
