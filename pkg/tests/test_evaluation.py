import math

import numpy as np
import pytest
import torch
from skimage.metrics import structural_similarity

from digression.errors import ValidationError
from digression.evaluation import (
    CallableAdapter, EvalReport, augment, evaluate_pair, inpaint, max_inscribed_rect, metric_panel, psnr,
    random_sign_perturbation, ssim, start_timestep, timestep_schedule, write_report,
)
from digression.masking import ContextImage


def skimage_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Reference SSIM restricted to windows fully inside the image (5-pixel border crop)."""
    vals = []
    for x, y in zip(a, b):
        _, full = structural_similarity(x, y, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                        data_range=1.0, full=True)
        vals.append(full[5:-5, 5:-5].mean())
    return float(np.mean(vals))


# -- metrics ---------------------------------------------------------------------------

def test_identity_metrics():
    a = np.random.default_rng(0).random((3, 32, 32))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert psnr(a, a) == 100.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ssim_matches_reference(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((3, 40, 48))
    b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(skimage_ssim(a, b), abs=1e-10)


def test_ssim_inverted_binary_image():
    a = (np.random.default_rng(5).random((1, 32, 32)) > 0.5).astype(np.float64)
    value = ssim(a, 1 - a)
    assert value == pytest.approx(skimage_ssim(a, 1 - a), abs=1e-10)
    assert value < -0.9


def test_psnr_analytic_case():
    a = np.full((3, 16, 16), 0.3)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_monotone_in_mse():
    a = np.zeros((1, 16, 16))
    vals = [psnr(a, a + d) for d in (0.01, 0.05, 0.2)]
    assert vals[0] > vals[1] > vals[2]


def test_metric_panel_adapters():
    a = np.zeros((3, 16, 16))
    panel = metric_panel(a, a)
    assert panel.available["lpips"] is False and panel.extras["lpips"] is None
    panel = metric_panel(a, a, {"l1": CallableAdapter("l1", lambda x, y: float(np.abs(x - y).sum()))})
    assert panel.extras["l1"] == 0.0
    with pytest.raises(ValidationError):
        ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


# -- augmentations ---------------------------------------------------------------------

def test_identity_params():
    x = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(0))
    assert torch.allclose(augment(x, "gaussian_noise", {"sigma": 0.0}), x, atol=1e-7)
    assert torch.allclose(augment(x, "jitter", {"brightness": 1.0, "contrast": 1.0, "saturation": 1.0}), x,
                          atol=1e-6)
    assert torch.allclose(augment(x, "rotate_crop", {"degrees": 0.0}), x, atol=1e-7)
    # smooth content survives quality 100 almost untouched
    ramp = torch.linspace(0, 1, 64).expand(3, 64, 64).contiguous()
    assert float((augment(ramp, "jpeg", {"quality": 100}) - ramp).abs().max()) < 3 / 255


def test_gaussian_noise_std():
    x = torch.full((3, 256, 256), 0.5)
    y = augment(x, "gaussian_noise", seed=3)
    assert abs(float((y - x).std()) / (5 / 255) - 1) < 0.05


def test_jpeg_is_lossy():
    x = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(1))
    y = augment(x, "jpeg")
    assert not torch.equal(y, x)
    assert float((y - x).abs().max()) > 1 / 255


def test_jitter_factors():
    gray = torch.full((3, 8, 8), 0.4)
    assert torch.allclose(augment(gray, "jitter"), torch.full_like(gray, 0.44), atol=1e-6)
    x = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(2)) * 0.5
    only_contrast = augment(x, "jitter", {"brightness": 1.0, "contrast": 1.1, "saturation": 1.0}).double()
    luma = torch.tensor([0.299, 0.587, 0.114], dtype=torch.float64)
    mean = float(torch.tensordot(luma, x.double(), dims=1).mean())
    assert torch.allclose(only_contrast, (mean + 1.1 * (x.double() - mean)).clamp(0, 1), atol=1e-6)


def test_rotate_crop_geometry():
    w, h = max_inscribed_rect(64, 64, math.radians(5))
    # square case: side = s / (cos a + sin a)
    assert w == pytest.approx(64 / (math.cos(math.radians(5)) + math.sin(math.radians(5))), rel=1e-12)
    assert w == pytest.approx(h)
    x = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(3))
    y = augment(x, "rotate_crop")
    assert y.shape == x.shape and not torch.allclose(y, x)
    # crop stays inside the rotated image, so a constant image stays constant (no fill)
    c = augment(torch.full((3, 64, 64), 0.7), "rotate_crop")
    assert torch.allclose(c, torch.full_like(c, 0.7), atol=1e-5)


def test_unknown_augmentation():
    with pytest.raises(ValidationError):
        augment(torch.zeros(3, 8, 8), "blur")


# -- sampler and harness ---------------------------------------------------------------

def test_start_timesteps():
    assert start_timestep(1.0, 1000) == 1000
    assert start_timestep(0.8, 1000) == 800
    assert timestep_schedule(800, 50)[0] == 800 and timestep_schedule(800, 50)[-1] == 0
    with pytest.raises(ValidationError):
        start_timestep(0.0, 1000)


def test_inpaint_steps_validation(backend, pair):
    x, m = pair
    with pytest.raises(ValidationError):
        inpaint(backend, x, m, backend.null_embedding(8), steps=0)


def test_full_strength_ignores_image_latent(backend, pair):
    """At strength 1 the start latent is pure noise, so only C and M carry the image."""
    x, m = pair
    tau = backend.null_embedding(8)
    _, z_a = inpaint(backend, x, m, tau, 1.0, 10, seed=0, return_latent=True)
    # a different image with the same masked context gives the same rollout
    other_pixels = x.pixels.clone()
    hole = m.pixel_grid.expand_as(other_pixels) == 0
    other_pixels[hole] = 1.0 - other_pixels[hole]
    y = ContextImage.from_pixels(other_pixels, backend)
    keep = m.grid.bool().expand_as(x.latent)
    if torch.equal(y.latent[keep], x.latent[keep]):
        _, z_b = inpaint(backend, y, m, tau, 1.0, 10, seed=0, return_latent=True)
        assert torch.equal(z_a, z_b)
    # below full strength the image latent enters the start point
    _, z_c = inpaint(backend, x, m, tau, 0.8, 10, seed=0, return_latent=True)
    _, z_d = inpaint(backend, y, m, tau, 0.8, 10, seed=0, return_latent=True)
    assert not torch.equal(z_c, z_d)


def test_evaluate_identical_and_rows(tmp_path, backend, pair):
    x, m = pair
    tau = backend.null_embedding(8)
    rep = evaluate_pair(backend, x, x, m, tau, (0.8, 1.0), (0, 1), ("jpeg",), steps=10)
    assert len(rep.rows) == 2 * 2 * 2
    assert all(r["ssim"] == pytest.approx(1.0) for r in rep.rows)
    paths = write_report(rep, tmp_path)
    header = paths["csv"].read_text().splitlines()[0].split(",")
    assert header[:6] == ["image_id", "strength", "seed", "aug", "ssim", "psnr"]
    assert paths["plot"].exists() and paths["summary"].exists()


def test_random_sign_control(pair):
    x, _ = pair
    y = random_sign_perturbation(x, 12 / 255, 0)
    assert float((y - x.pixels.double()).abs().max()) <= 12 / 255 + 1e-6  # float32 pixels
    assert torch.equal(y, random_sign_perturbation(x, 12 / 255, 0))


def test_report_summary():
    rep = EvalReport([{"image_id": "a", "strength": 1.0, "seed": s, "aug": "none", "ssim": v, "psnr": 10.0}
                      for s, v in enumerate((0.2, 0.4))])
    assert rep.summary()["1.0/none"]["ssim"] == pytest.approx(0.3)
    assert rep.mean("ssim", 1.0) == pytest.approx(0.3)
