"""Small deterministic inpainting backend for desk-scale verification.

Architecture
------------
* Autoencoder: fixed (untrained) block-average pooling by ``downsample`` followed by an
  orthonormal ``3 -> latent_channels`` channel mix. Decoding applies the transpose mix and
  nearest upsampling. With ``downsample=1`` the round trip is exact. On top of that the
  encoder writes a fixed texture response ``texture_scale * tanh(texture_gain * r)``
  along the one latent direction orthogonal to the mix, where ``r`` is a zero-sum sign
  filter over each block. Flat blocks give ``r = 0``; small high-frequency pixel
  patterns move it strongly, much like a learned VAE encoder. The decoder ignores that
  direction, so reconstructions are unchanged by it.
* Text encoder: token-embedding table plus learned positions, then two bidirectional
  transformer layers. The null embedding is ``encode_text(zeros)``.
* Denoiser: two-level UNet over ``[z_t, C, M]`` (9 input channels for 4 latent channels).
  Attention blocks sit at ``down.16`` (full latent resolution), ``mid.8`` (half resolution)
  and ``up.16``. Each block runs self-attention, then cross-attention to ``tau``, then a
  feed-forward. The captured hidden state of a block is its self-attention output after
  the output projection, before the residual add.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ContractViolation
from .base import BackendSpec, DenoiserOutput, HiddenStateBundle, InpaintingDenoiser, conditioning_hash
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class ToyConfig:
    image_size: int = 64
    downsample: int = 4
    latent_channels: int = 4
    base_channels: int = 32
    num_heads: int = 4
    vocab_size: int = 1024
    embed_dim: int = 32
    max_tokens: int = 16
    num_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    latent_scale: float = 1.0
    # fixed texture response written along the latent direction the decoder ignores
    texture_gain: float = 8.0
    texture_scale: float = 1.5
    seed: int = 0

    @property
    def latent_size(self) -> int:
        return self.image_size // self.downsample

    def to_dict(self) -> dict:
        return asdict(self)


def _mixing_matrix(latent_channels: int, seed: int) -> torch.Tensor:
    """Orthonormal-column ``(latent_channels, 3)`` matrix, fixed by ``seed``."""
    if latent_channels < 3:
        raise ContractViolation("toy autoencoder needs at least 3 latent channels")
    g = np.random.default_rng(seed + 7919)
    q, r = np.linalg.qr(g.standard_normal((latent_channels, 3)))
    q = q * np.sign(np.diag(r))
    return torch.from_numpy(q).float()


def _texture_basis(latent_channels: int, downsample: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Unit latent direction orthogonal to the colour mix, and a ``(1, 3, f, f)`` filter.

    The filter holds ``+-1 / (3 f^2)`` with zero sum per colour channel, so flat blocks
    respond with exactly 0 and the block response to any ``delta`` is bounded by
    ``max|delta|`` (times 2 after the ``2x - 1`` rescale).
    """
    mix = _mixing_matrix(latent_channels, seed).double().numpy()
    if latent_channels == 3:
        return torch.zeros(3), torch.zeros(1, 3, downsample, downsample)
    q, _ = np.linalg.qr(mix, mode="complete")
    direction = q[:, 3]
    direction = direction * np.sign(direction[np.argmax(np.abs(direction))])
    g = np.random.default_rng(seed + 104729)
    n = downsample * downsample
    pattern = np.stack([g.permutation(np.repeat([1.0, -1.0], [n - n // 2, n // 2])) for _ in range(3)])
    if n % 2:
        pattern[:, 0] = 0.0  # keep every channel zero-sum
    pattern = pattern.reshape(1, 3, downsample, downsample) / (3 * n)
    return torch.from_numpy(direction).float(), torch.from_numpy(pattern).float()


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def _heads(x: torch.Tensor, n: int) -> torch.Tensor:
    b, s, c = x.shape
    return x.view(b, s, n, c // n).transpose(1, 2)


def _merge(x: torch.Tensor) -> torch.Tensor:
    b, n, s, d = x.shape
    return x.transpose(1, 2).reshape(b, s, n * d)


class AttentionBlock(nn.Module):
    def __init__(self, ch: int, ctx_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.GroupNorm(8, ch)
        self.qkv = nn.Linear(ch, 3 * ch)
        self.proj = nn.Linear(ch, ch)
        self.norm2 = nn.LayerNorm(ch)
        self.q_cross = nn.Linear(ch, ch)
        self.kv_cross = nn.Linear(ctx_dim, 2 * ch)
        self.proj_cross = nn.Linear(ch, ch)
        self.norm3 = nn.LayerNorm(ch)
        self.ff = nn.Sequential(nn.Linear(ch, 2 * ch), nn.GELU(), nn.Linear(2 * ch, ch))

    def forward(self, x: torch.Tensor, ctx: torch.Tensor):
        b, c, h, w = x.shape
        seq = x.flatten(2).transpose(1, 2)
        q, k, v = self.qkv(self.norm1(x).flatten(2).transpose(1, 2)).chunk(3, dim=-1)
        sa = F.scaled_dot_product_attention(_heads(q, self.heads), _heads(k, self.heads), _heads(v, self.heads))
        sa = self.proj(_merge(sa))
        seq = seq + sa
        q = self.q_cross(self.norm2(seq))
        k, v = self.kv_cross(ctx).chunk(2, dim=-1)
        ca = F.scaled_dot_product_attention(_heads(q, self.heads), _heads(k, self.heads), _heads(v, self.heads))
        seq = seq + self.proj_cross(_merge(ca))
        seq = seq + self.ff(self.norm3(seq))
        return seq.transpose(1, 2).reshape(b, c, h, w), sa


class MixerLayer(nn.Module):
    """Pre-norm bidirectional self-attention + MLP over the token axis."""

    def __init__(self, d: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))

    def forward(self, x):
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        a = F.scaled_dot_product_attention(_heads(q, self.heads), _heads(k, self.heads), _heads(v, self.heads))
        x = x + self.proj(_merge(a))
        return x + self.mlp(self.norm2(x))


class TextEncoder(nn.Module):
    def __init__(self, cfg: ToyConfig):
        super().__init__()
        d = cfg.embed_dim
        self.token_embedding = nn.Embedding(cfg.vocab_size, d)
        self.positions = nn.Parameter(torch.zeros(cfg.max_tokens, d))
        self.layers = nn.ModuleList(MixerLayer(d) for _ in range(2))
        self.final_norm = nn.LayerNorm(d)
        nn.init.normal_(self.token_embedding.weight, std=1.0)
        nn.init.normal_(self.positions, std=0.02)

    def forward(self, pi: torch.Tensor) -> torch.Tensor:
        x = pi + self.positions[: pi.shape[1]]
        for layer in self.layers:
            x = layer(x)
        return self.final_norm(x)


class ToyUNet(nn.Module):
    layer_ids = ("down.16", "mid.8", "up.16")

    def __init__(self, cfg: ToyConfig):
        super().__init__()
        ch, lc = cfg.base_channels, cfg.latent_channels
        tdim = 4 * ch
        self.tdim_in = 2 * ch
        self.time_mlp = nn.Sequential(nn.Linear(self.tdim_in, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.conv_in = nn.Conv2d(2 * lc + 1, ch, 3, padding=1)
        self.down_res = ResBlock(ch, ch, tdim)
        self.down_attn = AttentionBlock(ch, cfg.embed_dim, cfg.num_heads)
        self.downsample = nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1)
        self.mid_res1 = ResBlock(2 * ch, 2 * ch, tdim)
        self.mid_attn = AttentionBlock(2 * ch, cfg.embed_dim, cfg.num_heads)
        self.mid_res2 = ResBlock(2 * ch, 2 * ch, tdim)
        self.upsample = nn.Conv2d(2 * ch, ch, 3, padding=1)
        self.up_res = ResBlock(2 * ch, ch, tdim)
        self.up_attn = AttentionBlock(ch, cfg.embed_dim, cfg.num_heads)
        self.norm_out = nn.GroupNorm(8, ch)
        self.conv_out = nn.Conv2d(ch, lc, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, z_t, t, context, mask, tau):
        temb = self.time_mlp(timestep_embedding(t, self.tdim_in).to(z_t.dtype))
        x = self.conv_in(torch.cat([z_t, context, mask], dim=1))
        h1 = self.down_res(x, temb)
        h1, sa_down = self.down_attn(h1, tau)
        h2 = self.mid_res1(self.downsample(h1), temb)
        h2, sa_mid = self.mid_attn(h2, tau)
        h2 = self.mid_res2(h2, temb)
        u = self.upsample(F.interpolate(h2, scale_factor=2, mode="nearest"))
        u = self.up_res(torch.cat([u, h1], dim=1), temb)
        u, sa_up = self.up_attn(u, tau)
        eps = self.conv_out(F.silu(self.norm_out(u)))
        return eps, (sa_down, sa_mid, sa_up)


class ToyNet(nn.Module):
    """All trainable toy weights plus the fixed autoencoder mix."""

    def __init__(self, cfg: ToyConfig):
        super().__init__()
        torch.manual_seed(cfg.seed)
        self.text = TextEncoder(cfg)
        self.unet = ToyUNet(cfg)
        self.register_buffer("mix", _mixing_matrix(cfg.latent_channels, cfg.seed))
        direction, pattern = _texture_basis(cfg.latent_channels, cfg.downsample, cfg.seed)
        self.register_buffer("texture_dir", direction)
        self.register_buffer("texture_filter", pattern)


class ToyBackend(InpaintingDenoiser):
    """Immutable wrapper exposing :class:`ToyNet` through the backend contract."""

    def __init__(self, cfg: ToyConfig | None = None, net: ToyNet | None = None):
        self.cfg = cfg or ToyConfig()
        self.net = net if net is not None else ToyNet(self.cfg)
        self.net.eval()
        self.net.requires_grad_(False)
        c = self.cfg
        s = c.latent_size
        self.schedule = NoiseSchedule(c.num_timesteps, c.beta_start, c.beta_end)
        self.spec = BackendSpec(
            latent_shape=(c.latent_channels, s, s),
            pixel_shape=(3, c.image_size, c.image_size),
            max_timestep=c.num_timesteps,
            vocab_size=c.vocab_size,
            embed_dim=c.embed_dim,
            attention_layer_ids=ToyUNet.layer_ids,
            layer_resolutions=(s, s // 2, s),
        )
        # |z| bound of the fixed autoencoder, used to clip x0 estimates while sampling
        self.latent_clip = math.sqrt(3.0) * c.latent_scale
        self.checkpoint_hash: str | None = None  # sha256 of the weights file, set by load_checkpoint

    # -- dtype handling -----------------------------------------------------------

    def to(self, dtype: torch.dtype) -> "ToyBackend":
        """Copy of this backend with weights cast to ``dtype``."""
        net = copy.deepcopy(self.net).to(dtype)
        out = ToyBackend(self.cfg, net)
        out.checkpoint_hash = self.checkpoint_hash
        return out

    def double(self) -> "ToyBackend":
        return self.to(torch.float64)

    # -- contract -----------------------------------------------------------------

    def token_table(self) -> torch.Tensor:
        return self.net.text.token_embedding.weight

    def encode_text(self, pi: torch.Tensor) -> torch.Tensor:
        self._check_tokens(pi)
        if pi.shape[1] > self.cfg.max_tokens:
            raise ContractViolation(f"at most {self.cfg.max_tokens} tokens supported")
        return self.net.text(pi)

    def embed_ids(self, ids: torch.Tensor) -> torch.Tensor:
        return self.net.text.token_embedding(ids)

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        self._check_pixels(x)
        f = self.cfg.downsample
        pooled = F.avg_pool2d(2.0 * x - 1.0, f) if f > 1 else 2.0 * x - 1.0
        z = torch.einsum("lc,bchw->blhw", self.net.mix.to(x.dtype), pooled)
        c = self.cfg
        if c.texture_scale and c.latent_channels > 3:
            r = F.conv2d(2.0 * x - 1.0, self.net.texture_filter.to(x.dtype), stride=f)
            tex = c.texture_scale * torch.tanh(c.texture_gain * r)
            z = z + self.net.texture_dir.to(x.dtype)[None, :, None, None] * tex
        return z * c.latent_scale

    def decode_image(self, z: torch.Tensor) -> torch.Tensor:
        self._check_latent(z, "latent")
        rgb = torch.einsum("lc,blhw->bchw", self.net.mix.to(z.dtype), z / self.cfg.latent_scale)
        f = self.cfg.downsample
        if f > 1:
            rgb = F.interpolate(rgb, scale_factor=f, mode="nearest")
        return ((rgb + 1.0) / 2.0).clamp(0.0, 1.0)

    def forward(
        self,
        z_t: torch.Tensor,
        t,
        context: torch.Tensor,
        mask: torch.Tensor,
        tau: torch.Tensor,
        layers: Sequence[str] | None = None,
    ) -> DenoiserOutput:
        self._check_latent(z_t, "z_t")
        self._check_latent(context, "context")
        self._check_mask(mask)
        if tau.ndim != 3 or tau.shape[-1] != self.spec.embed_dim:
            raise ContractViolation(f"text embedding shape {tuple(tau.shape)} invalid")
        b = z_t.shape[0]
        self.schedule.check_timestep(t)
        tt = torch.as_tensor(t, dtype=torch.long)
        if tt.ndim == 0:
            tt = tt.expand(b)
        if tt.shape != (b,):
            raise ContractViolation(f"need one timestep per batch row, got shape {tuple(tt.shape)}")
        context, mask, tau = (_broadcast(v, b, n) for v, n in ((context, "context"), (mask, "mask"), (tau, "tau")))
        eps, captured = self.net.unet(z_t, tt, context, mask, tau)
        entries = [(name, sa.flatten(1)) for name, sa in zip(ToyUNet.layer_ids, captured)]
        timestep = int(tt[0]) if bool((tt == tt[0]).all()) else tt.tolist()
        bundle = HiddenStateBundle(
            entries, timestep, {"conditioning_hash": conditioning_hash(context, mask, tau)}
        )
        return DenoiserOutput(eps, bundle.select(layers))


def _broadcast(v: torch.Tensor, b: int, name: str) -> torch.Tensor:
    if v.shape[0] == b:
        return v
    if v.shape[0] == 1:
        return v.expand(b, *v.shape[1:])
    raise ContractViolation(f"{name} batch {v.shape[0]} incompatible with batch {b}")
