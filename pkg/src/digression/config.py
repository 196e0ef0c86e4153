"""Run configuration: built-in defaults < config file < command-line overrides.

The config file is INI-style key-value text::

    # comments start with '#'
    [budget]
    epsilon = 12/255        # L-inf budget in [0, 1] pixel units
    step_size = 3/255
    iterations = 250
    grad_avg = 7            # (z_T, t) draws averaged per PGD step
    seed = 0
    norm = linf             # linf | l2

    [inversion]
    num_tokens = 8
    steps = 200
    step_size = 0.5
    batch_size = 4
    seed = 0
    metric = cosine         # cosine | euclidean
    project = true
    noise_to_terminal = false

    [timestep]
    mean = auto             # auto -> 0.72 * T (720 for T = 1000)
    std = 5.8
    clamp_min = 1
    clamp_max = auto        # auto -> T

    [centroid]
    n_samples = 32
    seed = 0
    text = inverted         # inverted | null
    recompute = false

    [eval]
    strengths = 0.8, 0.9, 1.0
    seeds = 0, 1, 2, 3
    steps = 50
    augmentations =         # comma list of gaussian_noise, jpeg, jitter, rotate_crop

Overrides use dotted keys, e.g. ``budget.iterations=100``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping

from .errors import ValidationError

DEFAULTS: dict[str, dict[str, str]] = {
    "budget": {"epsilon": "12/255", "step_size": "3/255", "iterations": "250", "grad_avg": "7",
               "seed": "0", "norm": "linf"},
    "inversion": {"num_tokens": "8", "steps": "200", "step_size": "0.5", "batch_size": "4", "seed": "0",
                  "metric": "cosine", "project": "true", "noise_to_terminal": "false"},
    "timestep": {"mean": "auto", "std": "5.8", "clamp_min": "1", "clamp_max": "auto"},
    "centroid": {"n_samples": "32", "seed": "0", "text": "inverted", "recompute": "false"},
    "eval": {"strengths": "0.8, 0.9, 1.0", "seeds": "0, 1, 2, 3", "steps": "50", "augmentations": ""},
}


def parse_number(text: str) -> float:
    """Float or fraction such as ``12/255``."""
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise ValidationError(f"not a number: {text!r}") from None


def _int(text: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise ValidationError(f"not an integer: {text!r}") from None


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"not a boolean: {text!r}")


def _list(text: str, conv) -> list:
    return [conv(p) for p in text.split(",") if p.strip()]


@dataclass
class RunConfig:
    """Resolved string values per section, plus the typed views the pipeline needs."""

    values: dict[str, dict[str, str]] = field(default_factory=lambda: {s: dict(v) for s, v in DEFAULTS.items()})
    sources: dict[str, str] = field(default_factory=dict)

    def get(self, key: str) -> str:
        section, name = key.split(".", 1)
        return self.values[section][name]

    def flat(self) -> dict[str, str]:
        return {f"{s}.{k}": v for s, kv in self.values.items() for k, v in kv.items()}

    # -- typed views ----------------------------------------------------------------

    def budget(self):
        from .attack import AttackBudget

        b = self.values["budget"]
        return AttackBudget(
            epsilon=parse_number(b["epsilon"]), step_size=parse_number(b["step_size"]),
            iterations=_int(b["iterations"]), grad_avg=_int(b["grad_avg"]), seed=_int(b["seed"]),
            norm=b["norm"].strip(),
        )

    def timestep_dist(self, max_timestep: int):
        from .timesteps import TimestepDistribution

        t = self.values["timestep"]
        mean = 0.72 * max_timestep if t["mean"].strip() == "auto" else parse_number(t["mean"])
        hi = max_timestep if t["clamp_max"].strip() == "auto" else _int(t["clamp_max"])
        return TimestepDistribution(mean, parse_number(t["std"]), (_int(t["clamp_min"]), hi))

    def inversion(self, max_timestep: int):
        from .inversion import InversionConfig

        v = self.values["inversion"]
        return InversionConfig(
            num_tokens=_int(v["num_tokens"]), steps=_int(v["steps"]), step_size=parse_number(v["step_size"]),
            timestep_dist=self.timestep_dist(max_timestep), seed=_int(v["seed"]),
            batch_size=_int(v["batch_size"]), metric=v["metric"].strip(), project=_bool(v["project"]),
            noise_to_terminal=_bool(v["noise_to_terminal"]),
        )

    def centroid(self) -> dict:
        c = self.values["centroid"]
        text = c["text"].strip()
        if text not in ("inverted", "null"):
            raise ValidationError(f"centroid.text must be 'inverted' or 'null', got {text!r}")
        return {"n_samples": _int(c["n_samples"]), "seed": _int(c["seed"]), "text": text,
                "recompute": _bool(c["recompute"])}

    def evaluation(self) -> dict:
        e = self.values["eval"]
        return {"strengths": _list(e["strengths"], parse_number), "seeds": _list(e["seeds"], _int),
                "steps": _int(e["steps"]), "augmentations": _list(e["augmentations"], str.strip)}

    def validate(self, max_timestep: int = 1000) -> None:
        self.budget()
        self.inversion(max_timestep)
        self.centroid()
        self.evaluation()


def read_config_file(path: str | Path) -> dict[str, dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.read(path)
    out: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        if section not in DEFAULTS:
            raise ValidationError(f"{path}: unknown section [{section}]")
        for key, value in parser[section].items():
            if key not in DEFAULTS[section]:
                raise ValidationError(f"{path}: unknown key {section}.{key}")
            out.setdefault(section, {})[key] = value
    return out


def resolve_config(path: str | Path | None = None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    cfg.sources = {k: "default" for k in cfg.flat()}
    if path is not None:
        for section, kv in read_config_file(path).items():
            for key, value in kv.items():
                cfg.values[section][key] = value
                cfg.sources[f"{section}.{key}"] = "file"
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        if "." not in dotted:
            raise ValidationError(f"override key must be section.key, got {dotted!r}")
        section, key = dotted.split(".", 1)
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ValidationError(f"unknown config key {dotted!r}")
        cfg.values[section][key] = str(value)
        cfg.sources[dotted] = "cli"
    return cfg
