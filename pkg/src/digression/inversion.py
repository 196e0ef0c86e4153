"""Token-projective textual optimization.

Finds token embeddings whose encoded text embedding best explains the context region
of an image under the inpainting denoiser. Each step evaluates the masked denoising
loss at the *projected* tokens ``Proj(pi)`` (every row snapped to its nearest vocabulary
row), and applies the resulting gradient to the continuous ``pi`` (straight-through).
The returned prompt is always projected, so every row is an exact vocabulary row.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .backend.base import InpaintingDenoiser
from .errors import ContractViolation, DivergenceError, ValidationError
from .masking import ContextImage, InpaintMask, make_context
from .timesteps import TimestepDistribution, latent_noise

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TokenPrompt:
    pi: torch.Tensor                     # (num_tokens, embed_dim)
    vocab_ids: tuple[int, ...] | None = None

    @property
    def num_tokens(self) -> int:
        return self.pi.shape[0]


@dataclass(frozen=True)
class InversionConfig:
    num_tokens: int = 8
    steps: int = 200
    step_size: float = 0.5
    timestep_dist: TimestepDistribution | None = None  # None -> 0.72 T window of the backend
    seed: int = 0
    batch_size: int = 4
    metric: str = "cosine"
    project: bool = True
    # literal variant: always noise to the terminal timestep instead of sampling t
    noise_to_terminal: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("inversion steps must be >= 1")
        if self.step_size < 0:
            raise ValidationError("inversion step size must be >= 0")
        if self.num_tokens < 1 or self.batch_size < 1:
            raise ValidationError("num_tokens and batch_size must be >= 1")
        if self.metric not in ("cosine", "euclidean"):
            raise ValidationError(f"unknown projection metric {self.metric!r}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("num_tokens", "steps", "step_size", "seed", "batch_size", "metric", "project", "noise_to_terminal")}
        d["timestep_dist"] = self.timestep_dist.to_dict() if self.timestep_dist else None
        return d


def nearest_token_ids(pi: torch.Tensor, vocab: torch.Tensor, metric: str = "cosine") -> torch.Tensor:
    if vocab.ndim != 2 or vocab.shape[0] == 0:
        raise ContractViolation("vocabulary table is empty")
    if pi.shape[-1] != vocab.shape[1]:
        raise ContractViolation(f"embed dim {pi.shape[-1]} != vocabulary dim {vocab.shape[1]}")
    q = pi.detach().reshape(-1, vocab.shape[1]).to(vocab.dtype)
    v = vocab.detach()
    if metric == "cosine":
        qn = q / q.norm(dim=1, keepdim=True).clamp_min(1e-12)
        vn = v / v.norm(dim=1, keepdim=True).clamp_min(1e-12)
        return (qn @ vn.T).argmax(dim=1)
    return torch.cdist(q, v).argmin(dim=1)


def project_tokens(pi: TokenPrompt | torch.Tensor, vocab: torch.Tensor, metric: str = "cosine") -> TokenPrompt:
    """Replace every row by its nearest vocabulary row (idempotent)."""
    rows = pi.pi if isinstance(pi, TokenPrompt) else pi
    ids = nearest_token_ids(rows, vocab, metric)
    projected = vocab.detach()[ids].reshape(rows.shape).clone()
    return TokenPrompt(projected, tuple(int(i) for i in ids))


def inversion_loss(
    backend: InpaintingDenoiser,
    pi: torch.Tensor,
    context: torch.Tensor,
    mask: torch.Tensor,
    z_t: torch.Tensor,
    t,
    eps: torch.Tensor,
) -> torch.Tensor:
    """``sum((eps * M - eps_hat(z_t, C, tau, M_inv) * M)^2)``, averaged over the batch.

    ``pi`` is ``(L, D)`` or ``(B, L, D)``; ``context`` is the masked latent ``C``; ``mask`` is
    the latent mask ``M`` (1 = context). The denoiser is conditioned on the inverted mask.
    """
    if eps.shape != z_t.shape:
        raise ContractViolation(f"eps shape {tuple(eps.shape)} != z_t shape {tuple(z_t.shape)}")
    if pi.ndim == 2:
        pi = pi[None]
    tau = backend.encode_text(pi)
    out = backend.forward(z_t, t, context, 1.0 - mask, tau)
    m = mask.to(eps.dtype)
    residual = (eps - out.eps_pred) * m
    return residual.pow(2).flatten(1).sum(dim=1).mean()


@dataclass
class InversionResult:
    prompt: TokenPrompt
    tau: torch.Tensor                    # (1, L, D')
    losses: list[float] = field(default_factory=list)
    id_trace: list[tuple[int, ...]] = field(default_factory=list)
    continuous: torch.Tensor | None = None


def _draws(backend, rng, cfg, dist, z0):
    b = cfg.batch_size
    T = backend.spec.max_timestep
    ts = np.full(b, T, dtype=np.int64) if cfg.noise_to_terminal else dist.sample(rng, b)
    seeds = rng.integers(0, 2**62, size=b)
    eps = torch.cat([latent_noise(int(s), z0.shape, z0.dtype) for s in seeds])
    z_t = backend.add_noise(z0.expand(b, *z0.shape[1:]), torch.as_tensor(ts), eps)
    return torch.as_tensor(ts), eps, z_t


def invert(
    backend: InpaintingDenoiser,
    context: ContextImage,
    mask: InpaintMask,
    cfg: InversionConfig | None = None,
) -> InversionResult:
    cfg = cfg or InversionConfig()
    dist = cfg.timestep_dist or TimestepDistribution.for_backend(backend.spec.max_timestep)
    rng = np.random.default_rng(cfg.seed)
    vocab = backend.token_table()
    init_ids = torch.as_tensor(rng.integers(0, vocab.shape[0], size=cfg.num_tokens))
    pi = vocab.detach()[init_ids].clone()
    z0 = context.latent[None]
    C = make_context(context, mask)[None]
    M = mask.latent.to(z0.dtype)
    losses: list[float] = []
    id_trace: list[tuple[int, ...]] = []
    for step in range(cfg.steps):
        if cfg.project:
            proj = project_tokens(pi, vocab, cfg.metric)
            point = proj.pi
            id_trace.append(proj.vocab_ids)
        else:
            point = pi
        t, eps, z_t = _draws(backend, rng, cfg, dist, z0)
        point = point.clone().requires_grad_(True)
        loss = inversion_loss(backend, point, C, M, z_t, t, eps)
        (grad,) = torch.autograd.grad(loss, point)
        if not torch.isfinite(loss) or not torch.isfinite(grad).all():
            raise DivergenceError(f"non-finite inversion loss/gradient at step {step}")
        pi = pi - cfg.step_size * grad
        losses.append(float(loss.detach()))
        if step % 50 == 0:
            log.debug("inversion step %d loss %.5f", step, losses[-1])
    final = project_tokens(pi, vocab, cfg.metric) if cfg.project else TokenPrompt(pi.detach().clone())
    with torch.no_grad():
        tau = backend.encode_text(final.pi[None])
    return InversionResult(final, tau, losses, id_trace, pi.detach().clone())


def projection_ablation(
    backend: InpaintingDenoiser, context: ContextImage, mask: InpaintMask, cfg: InversionConfig | None = None
) -> dict[str, InversionResult]:
    """Run the same inversion with and without projection for loss-curve comparison."""
    cfg = cfg or InversionConfig()
    return {
        "projected": invert(backend, context, mask, replace(cfg, project=True)),
        "continuous": invert(backend, context, mask, replace(cfg, project=False)),
    }
