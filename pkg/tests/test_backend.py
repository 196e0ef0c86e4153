import numpy as np
import pytest
import torch

from conftest import central_difference, fd_agrees, rect_mask
from digression.backend import NoiseSchedule, ToyBackend, ToyConfig
from digression.backend.checkpoint import load_checkpoint, save_checkpoint
from digression.backend.toy import ToyNet
from digression.backend.train import smoothed, train_toy_backend
from digression.corpus import load_corpus
from digression.errors import ContractViolation, TimestepRangeError, ValidationError
from digression.masking import make_context


def _inputs(backend, b=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    shape = (b, *backend.spec.latent_shape)
    z = torch.randn(shape, generator=g, dtype=torch.float64).to(backend.dtype)
    C = torch.randn(shape, generator=g, dtype=torch.float64).to(backend.dtype)
    M = rect_mask().latent.to(backend.dtype)
    tau = backend.null_embedding(8)
    return z, C, M, tau


# -- schedule --------------------------------------------------------------------------

def test_alpha_bar_strictly_decreasing():
    ab = NoiseSchedule().alphas_cumprod
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)


def test_add_noise_identity_at_t0():
    s = NoiseSchedule()
    z0 = torch.randn(2, 4, 16, 16)
    assert torch.equal(s.add_noise(z0, 0, torch.randn_like(z0)), z0)


def test_terminal_signal_vanishes():
    s = NoiseSchedule()
    # oracle: product of (1 - beta) over the linear schedule computed independently
    betas = np.linspace(1e-4, 0.02, 1000)
    ab_T = np.prod(1 - betas)
    assert np.isclose(s.alphas_cumprod[-1], ab_T, rtol=1e-12)
    assert np.sqrt(ab_T) < 1e-2
    g = torch.Generator().manual_seed(0)
    z0 = torch.randn(4000, 1, dtype=torch.float64, generator=g)
    zT = s.add_noise(z0, 1000, torch.randn(4000, 1, dtype=torch.float64, generator=g))
    corr = np.corrcoef(z0[:, 0].numpy(), zT[:, 0].numpy())[0, 1]
    assert abs(corr) < 0.05


@pytest.mark.parametrize("t", [50, 500, 900])
def test_noise_variance_matches_schedule(t):
    s = NoiseSchedule()
    z0 = torch.full((10_000, 1), 0.7, dtype=torch.float64)
    eps = torch.randn(10_000, 1, dtype=torch.float64, generator=torch.Generator().manual_seed(t))
    zt = s.add_noise(z0, t, eps)
    assert abs(float(zt.var()) / (1 - s.alphas_cumprod[t]) - 1) < 0.05


def test_timestep_out_of_range():
    with pytest.raises(TimestepRangeError):
        NoiseSchedule().alpha_bar(1001)
    with pytest.raises(TimestepRangeError):
        NoiseSchedule().alpha_bar(-1)


# -- forward contract -------------------------------------------------------------------

def test_forward_shapes_and_layers(backend):
    z, C, M, tau = _inputs(backend)
    out = backend.forward(z, 500, C, M, tau)
    assert out.eps_pred.shape == z.shape
    assert out.hidden.layer_ids == list(backend.spec.attention_layer_ids)
    assert out.hidden.is_finite()
    for name, v in out.hidden:
        assert v.ndim == 2 and v.shape[0] == 2


def test_forward_is_deterministic(backend):
    z, C, M, tau = _inputs(backend)
    a = backend.forward(z, 720, C, M, tau)
    b = backend.forward(z, 720, C, M, tau)
    assert torch.equal(a.eps_pred, b.eps_pred)
    assert a.hidden.equal(b.hidden)


def test_fresh_toy_weights_are_seeded():
    a, b = ToyNet(ToyConfig()), ToyNet(ToyConfig())
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_conditioning_changes_hidden_states(backend):
    z, C, M, tau = _inputs(backend)
    base = backend.forward(z, 720, C, M, tau).hidden
    other_mask = backend.forward(z, 720, C, torch.ones_like(M), tau).hidden
    table = backend.token_table()
    other_tau = backend.encode_text(table[torch.arange(1, 9)][None])
    other_text = backend.forward(z, 720, C, M, other_tau).hidden
    assert not base.equal(other_mask)
    assert not base.equal(other_text)


def test_forward_rejects_bad_inputs(backend):
    z, C, M, tau = _inputs(backend)
    with pytest.raises(ContractViolation):
        backend.forward(z[:, :3], 10, C, M, tau)
    with pytest.raises(TimestepRangeError):
        backend.forward(z, 5000, C, M, tau)
    with pytest.raises(ContractViolation):
        backend.forward(z, 10, C, M, tau[..., :5])


def test_eps_context_pixel_jvp_matches_finite_difference(backend64, pair64):
    x, m = pair64
    b = backend64
    z, _, _, tau = _inputs(b, b=1, seed=3)
    M = m.latent.to(torch.float64)
    direction = torch.zeros_like(x.pixels)
    rng = np.random.default_rng(0)
    for _ in range(5):
        c, i, j = int(rng.integers(3)), int(rng.integers(64)), int(rng.integers(64))
        direction.zero_()
        direction[c, i, j] = 1.0
        weights = torch.randn(z.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(i))

        def f(p):
            C = m.grid.double() * b.encode_image(p[None])
            return (b.forward(z, 720, C, M, tau).eps_pred * weights).sum()

        p = x.pixels.clone().requires_grad_(True)
        (g,) = torch.autograd.grad(f(p), p)
        h = 1e-3
        numeric = (float(f(x.pixels + h * direction)) - float(f(x.pixels - h * direction))) / (2 * h)
        assert fd_agrees(float(g[c, i, j]), numeric), (c, i, j)


# -- text / image encoders ------------------------------------------------------------

def test_null_embedding_is_zero_prompt(backend):
    zeros = torch.zeros(1, 8, backend.spec.embed_dim)
    assert torch.equal(backend.encode_text(zeros), backend.null_embedding(8))
    assert torch.equal(backend.null_embedding(8), backend.null_embedding(8))


def test_text_gradient_matches_finite_difference(backend64):
    b = backend64
    pi = b.token_table()[torch.tensor([3, 17, 5, 9])][None].clone()

    def f(p):
        return b.encode_text(p).pow(2).sum()

    p = pi.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(p), p)
    rng = np.random.default_rng(1)
    for _ in range(5):
        idx = (0, int(rng.integers(4)), int(rng.integers(b.spec.embed_dim)))
        assert fd_agrees(float(g[idx]), central_difference(f, pi, idx, 1e-4))


def test_encode_image_shape_and_determinism(backend):
    x = torch.rand(2, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    z = backend.encode_image(x)
    assert z.shape == (2, *backend.spec.latent_shape)
    assert torch.equal(z, backend.encode_image(x))


def test_identity_encoder_round_trip():
    b = ToyBackend(ToyConfig(image_size=16, downsample=1))
    x = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    assert float(((b.decode_image(b.encode_image(x)) - x) ** 2).mean()) < 1e-3


def test_texture_channel_is_invisible_to_decoder(backend):
    flat = ToyBackend(ToyConfig(texture_scale=0.0), backend.net)
    x = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    assert torch.allclose(backend.decode_image(backend.encode_image(x)),
                          flat.decode_image(flat.encode_image(x)), atol=1e-6)
    const = torch.full((1, 3, 64, 64), 0.25)
    assert torch.allclose(backend.encode_image(const), flat.encode_image(const), atol=1e-6)


def test_make_context_uses_mask(backend, pair):
    x, m = pair
    C = make_context(x, m)
    keep = m.grid.bool().expand_as(C)
    assert torch.equal(C[keep], x.latent[keep])
    assert torch.all(C[~keep] == 0)


# -- checkpoints and training ---------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, backend):
    stem = save_checkpoint(backend, tmp_path / "ck")
    again = load_checkpoint(stem)
    for (k, a), (_, b) in zip(backend.net.state_dict().items(), again.net.state_dict().items()):
        assert torch.equal(a, b), k
    assert again.checkpoint_hash is not None


@pytest.fixture(scope="module")
def small_corpus():
    return load_corpus(limit=256)


def test_zero_steps_returns_initial_weights(small_corpus):
    res = train_toy_backend(small_corpus, 0)
    fresh = ToyNet(ToyConfig())
    for (k, a), (_, b) in zip(res.backend.net.state_dict().items(), fresh.state_dict().items()):
        assert torch.equal(a, b), k
    assert res.losses == []


def test_training_is_bitwise_deterministic(tmp_path, small_corpus):
    a = train_toy_backend(small_corpus, 5, batch_size=4, out=tmp_path / "a")
    b = train_toy_backend(small_corpus, 5, batch_size=4, out=tmp_path / "b")
    assert a.losses == b.losses
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


def test_training_needs_enough_images():
    with pytest.raises(ValidationError):
        train_toy_backend(load_corpus(limit=16), 1)


@pytest.mark.slow
def test_training_loss_halves_by_step_2000(small_corpus):
    res = train_toy_backend(load_corpus(), 2000, batch_size=8, log_every=0)
    s = smoothed(res.losses, 50)
    assert s[-1] < 0.5 * s[0]
