"""Projected sign-gradient ascent on the hidden-state digression loss.

For a perturbation ``delta`` of the context pixels the loss is

    L(delta) = E_{z_T, t} sum_i ||phi_i - H_i(z_T, M * E(x + delta), tau*, t)||^2

with ``phi`` the frozen centroid of the clean image. Each PGD step averages the gradient
over ``grad_avg`` independent ``(z_T, t)`` draws, moves every coordinate by
``step_size * sign(grad)`` (ascent) and projects back into the L-infinity ball and the
valid pixel range. Perturbation arithmetic runs in float64 so the ball constraint holds
to machine precision.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .backend.base import InpaintingDenoiser
from .centroid import SemanticCentroid, centroid_distance, context_hash, draw_seeds, estimate_centroid, sample_draw
from .errors import BudgetViolation, DivergenceError, ValidationError
from .masking import BUDGET_TOL, ContextImage, InpaintMask, Perturbation, context_latent
from .timesteps import TimestepDistribution

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackBudget:
    epsilon: float = 12 / 255
    step_size: float = 3 / 255
    iterations: int = 250
    grad_avg: int = 7
    seed: int = 0
    norm: str = "linf"

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ValidationError(f"unknown norm {self.norm!r}")
        if not 0 < self.step_size <= self.epsilon:
            raise ValidationError("need 0 < step_size <= epsilon")
        if self.iterations < 1 or self.grad_avg < 1:
            raise ValidationError("iterations and grad_avg must be >= 1")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("epsilon", "step_size", "iterations", "grad_avg", "seed", "norm")}


@dataclass
class StepResult:
    grad: torch.Tensor          # (3, H, W), gradient of the mean loss w.r.t. pixels
    loss: float
    per_draw: list[float]
    seeds: list[int]


def digression_step(
    backend: InpaintingDenoiser,
    pixels: torch.Tensor,
    mask: InpaintMask,
    tau: torch.Tensor,
    centroid: SemanticCentroid,
    dist: TimestepDistribution,
    grad_avg: int,
    rng: np.random.Generator | None = None,
    seeds: Sequence[int] | None = None,
    layer_weights: Mapping[str, float] | None = None,
    iteration: int | None = None,
) -> StepResult:
    """Mean digression loss over ``grad_avg`` draws and its gradient w.r.t. ``pixels``.

    ``pixels`` is the perturbed image ``x + delta`` of shape ``(3, H, W)``. Draw seeds come
    from ``rng`` unless given explicitly.
    """
    if seeds is None:
        if rng is None:
            raise ValidationError("need either rng or explicit draw seeds")
        seeds = [int(s) for s in rng.integers(0, 2**62, size=grad_avg)]
    seeds = [int(s) for s in seeds]
    draws = [sample_draw(s, dist, backend.spec.latent_shape, backend.dtype) for s in seeds]
    ts = torch.tensor([t for t, _ in draws])
    z = torch.cat([d for _, d in draws])
    p = pixels.detach().to(backend.dtype)[None].clone().requires_grad_(True)
    C = context_latent(backend, p, mask.grid)
    M = mask.latent.to(C.dtype)
    tau = tau if tau.ndim == 3 else tau[None]
    out = backend.forward(z, ts, C, M, tau, layers=centroid.layer_ids)
    per = centroid_distance(centroid, out.hidden, layer_weights)
    loss = per.mean()
    (grad,) = torch.autograd.grad(loss, p)
    if not torch.isfinite(loss) or not torch.isfinite(grad).all():
        raise DivergenceError(f"non-finite digression gradient at iteration {iteration} (draw seeds {seeds})")
    return StepResult(grad[0].detach(), float(loss.detach()), per.detach().tolist(), seeds)


def digression_loss(
    backend: InpaintingDenoiser,
    pixels: torch.Tensor,
    mask: InpaintMask,
    tau: torch.Tensor,
    centroid: SemanticCentroid,
    dist: TimestepDistribution,
    n_draws: int = 32,
    seed: int = 12345,
    layer_weights: Mapping[str, float] | None = None,
) -> float:
    """Digression loss on a fixed draw set, for comparing iterates without sampling noise."""
    seeds = draw_seeds(seed, n_draws)
    total = 0.0
    with torch.no_grad():
        for start in range(0, n_draws, 16):
            part = seeds[start : start + 16]
            draws = [sample_draw(s, dist, backend.spec.latent_shape, backend.dtype) for s in part]
            C = context_latent(backend, pixels.to(backend.dtype)[None], mask.grid)
            out = backend.forward(
                torch.cat([d for _, d in draws]), torch.tensor([t for t, _ in draws]),
                C, mask.latent.to(C.dtype), tau if tau.ndim == 3 else tau[None], layers=centroid.layer_ids,
            )
            total += float(centroid_distance(centroid, out.hidden, layer_weights).sum())
    return total / n_draws


@dataclass
class AttackTrace:
    losses: list[float] = field(default_factory=list)
    linf: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_loss: float = -np.inf
    best_iteration: int = -1
    best_delta: torch.Tensor | None = None
    perturbation: Perturbation | None = None

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "linf", "seconds"])
            for i, row in enumerate(zip(self.losses, self.linf, self.seconds)):
                w.writerow([i, repr(row[0]), repr(row[1]), f"{row[2]:.6f}"])
        return path


def _project(delta: torch.Tensor, x: torch.Tensor, budget: AttackBudget) -> torch.Tensor:
    if budget.norm == "linf":
        delta = delta.clamp(-budget.epsilon, budget.epsilon)
    else:
        n = float(delta.norm())
        if n > budget.epsilon:
            delta = delta * (budget.epsilon / n)
    delta = (x + delta).clamp(0.0, 1.0) - x
    if budget.norm == "linf":
        # the subtraction above can round one ulp past epsilon
        delta = delta.clamp(-budget.epsilon, budget.epsilon)
    return delta


def pgd_ascend(
    backend: InpaintingDenoiser,
    context: ContextImage,
    mask: InpaintMask,
    tau_star: torch.Tensor,
    centroid: SemanticCentroid,
    budget: AttackBudget | None = None,
    dist: TimestepDistribution | None = None,
    layer_weights: Mapping[str, float] | None = None,
    targeted: bool = False,
    recompute_centroid: bool = False,
    callback: Callable[[int, torch.Tensor, float], None] | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Perturbation, AttackTrace]:
    """Run the PGD loop from ``delta = 0``; returns the final perturbation and its trace.

    ``targeted=True`` flips the update to descent toward the given target (baseline mode).
    ``recompute_centroid=True`` re-estimates the centroid on the current iterate each step
    (ablation; the default keeps it frozen at the clean image). ``rng`` supplies the
    per-step draw seeds and defaults to ``default_rng(budget.seed)``.
    """
    budget = budget or AttackBudget()
    dist = dist or TimestepDistribution.for_backend(backend.spec.max_timestep)
    if centroid.context_hash and centroid.context_hash != context_hash(context, mask):
        raise ValidationError("centroid was estimated for a different context/mask")
    x = context.pixels.detach().to(torch.float64)
    delta = torch.zeros_like(x)
    rng = rng if rng is not None else np.random.default_rng(budget.seed)
    sign = -1.0 if targeted else 1.0
    trace = AttackTrace()
    target = centroid
    for k in range(budget.iterations):
        t0 = time.perf_counter()
        if recompute_centroid and k > 0:
            current = ContextImage.from_pixels((x + delta).float(), backend)
            target = estimate_centroid(
                backend, current, mask, tau_star, dist, centroid.sample_count, seed=budget.seed + k,
                layers=centroid.layer_ids,
            )
        step = digression_step(
            backend, x + delta, mask, tau_star, target, dist, budget.grad_avg, rng,
            layer_weights=layer_weights, iteration=k,
        )
        g = step.grad.to(torch.float64)
        score = -step.loss if targeted else step.loss
        if score > trace.best_loss:
            trace.best_loss, trace.best_iteration, trace.best_delta = score, k, delta.clone()
        if budget.norm == "linf":
            delta = delta + sign * budget.step_size * torch.sign(g)
        else:
            gn = float(g.norm())
            if gn > 0:
                delta = delta + sign * budget.step_size * g / gn
        delta = _project(delta, x, budget)
        size = float(delta.abs().max()) if budget.norm == "linf" else float(delta.norm())
        if size > budget.epsilon + BUDGET_TOL:
            raise BudgetViolation(f"internal: iterate {k} left the budget ({size:.3g} > {budget.epsilon:.3g})")
        trace.losses.append(step.loss)
        trace.linf.append(float(delta.abs().max()))
        trace.seconds.append(time.perf_counter() - t0)
        if callback is not None:
            callback(k, delta, step.loss)
        if k % 50 == 0:
            log.debug("pgd iteration %d loss %.4f", k, step.loss)
    perturbation = Perturbation(delta, budget, {"targeted": targeted})
    trace.perturbation = perturbation
    return perturbation, trace


def targeted_baseline(
    backend: InpaintingDenoiser,
    context: ContextImage,
    mask: InpaintMask,
    tau: torch.Tensor,
    target: SemanticCentroid,
    budget: AttackBudget | None = None,
    dist: TimestepDistribution | None = None,
) -> tuple[Perturbation, AttackTrace]:
    """Descent toward a fixed hidden-state target: the targeted counterpart used in ablations.

    ``target`` may come from any other image (e.g. a flat gray one); its context hash is
    ignored.
    """
    unbound = SemanticCentroid(target.means, target.variances, target.sample_count, target.config_hash, "", target.meta)
    return pgd_ascend(backend, context, mask, tau, unbound, budget, dist, targeted=True)


def immunized_pixels(context: ContextImage, p: Perturbation) -> torch.Tensor:
    return (context.pixels.to(torch.float64) + p.delta).clamp(0.0, 1.0)
