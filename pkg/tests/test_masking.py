import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rect_mask
from digression.attack import AttackBudget
from digression.errors import BudgetViolation, ValidationError
from digression.masking import (
    ContextImage, InpaintMask, Perturbation, apply_perturbation, downsample_mask, invert_mask, load_pair,
    make_context, read_mask, write_mask_png, write_png,
)


def _ctx(latent):
    return ContextImage(torch.zeros(3, *latent.shape[1:]), latent)


def test_all_ones_mask_keeps_latent(pair):
    x, _ = pair
    m = InpaintMask.full((64, 64), 4, 1.0)
    assert torch.equal(make_context(x, m), x.latent)


def test_all_zeros_mask_gives_zero(pair):
    x, _ = pair
    m = InpaintMask.full((64, 64), 4, 0.0)
    assert torch.count_nonzero(make_context(x, m)) == 0


def test_checkerboard_on_constant_latent():
    grid = torch.from_numpy((np.indices((16, 16)).sum(0) % 2).astype(np.float32))[None]
    m = InpaintMask(grid.repeat_interleave(4, 1).repeat_interleave(4, 2), grid)
    latent = torch.ones(4, 16, 16)
    C = make_context(_ctx(latent), m)
    assert torch.equal(C, grid.expand(4, 16, 16))


def test_mask_vote_rule():
    pg = torch.ones(1, 8, 8)
    pg[:, :4, :2] = 0  # half of the first cell -> still context
    pg[:, 4:, 4:7] = 0  # 12/16 of the last cell -> inpaint
    g = downsample_mask(pg, 4)
    assert g.tolist() == [[[1.0, 1.0], [1.0, 0.0]]]


def test_invert_all_ones():
    m = InpaintMask.full((64, 64), 4)
    inv = invert_mask(m)
    assert inv.grid.sum() == 0 and inv.pixel_grid.sum() == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_invert_is_involution_and_partitions(seed):
    g = torch.Generator().manual_seed(seed)
    pg = (torch.rand(1, 16, 16, generator=g) > 0.5).float()
    m = InpaintMask.from_pixels(pg, 4)
    inv = invert_mask(m)
    back = invert_mask(inv)
    assert torch.equal(back.grid, m.grid) and torch.equal(back.pixel_grid, m.pixel_grid)
    assert float(m.grid.sum() + inv.grid.sum()) == m.num_cells


def test_mask_validation():
    with pytest.raises(ValidationError):
        InpaintMask.from_pixels(torch.full((1, 8, 8), 0.5), 4)
    with pytest.raises(ValidationError):
        InpaintMask.from_pixels(torch.ones(1, 10, 8), 4)


def test_zero_delta_is_identity(backend, pair):
    x, _ = pair
    out = apply_perturbation(x, Perturbation(torch.zeros_like(x.pixels), AttackBudget()), backend)
    assert torch.equal(out.pixels, x.pixels)


def test_oversized_delta_rejected(backend, pair):
    x, _ = pair
    with pytest.raises(BudgetViolation):
        apply_perturbation(x, Perturbation(torch.ones_like(x.pixels), AttackBudget()), backend)


def test_clamp_at_white(backend):
    x = ContextImage.from_pixels(torch.ones(3, 64, 64), backend)
    out = apply_perturbation(x, Perturbation(torch.full((3, 64, 64), 12 / 255), AttackBudget()), backend)
    assert torch.all(out.pixels == 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.2))
def test_projection_containment(seed, eps):
    from digression.attack import _project

    if eps == 0.0:
        return
    budget = AttackBudget(epsilon=eps, step_size=eps)
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(3, 8, 8, generator=g, dtype=torch.float64)
    delta = torch.zeros_like(x)
    for _ in range(5):
        delta = _project(delta + torch.randn(x.shape, generator=g, dtype=torch.float64), x, budget)
        assert float(delta.abs().max()) <= eps + 1e-12
        assert float((x + delta).min()) >= 0.0 and float((x + delta).max()) <= 1.0


def test_png_round_trip(tmp_path, backend, sample_paths):
    x, m = load_pair(*sample_paths, backend)
    write_png(tmp_path / "x.png", x.pixels)
    write_mask_png(tmp_path / "m.png", m)
    y, m2 = load_pair(tmp_path / "x.png", tmp_path / "m.png", backend)
    assert torch.equal(y.pixels, x.pixels)
    assert torch.equal(m2.grid, m.grid)


def test_load_pair_errors(tmp_path, backend, sample_paths):
    image, _ = sample_paths
    with pytest.raises(FileNotFoundError, match="nope.png"):
        load_pair(image, tmp_path / "nope.png", backend)
    write_png(tmp_path / "small.png", torch.zeros(3, 32, 32))
    with pytest.raises(ValidationError):
        load_pair(tmp_path / "small.png", sample_paths[1], backend)


def test_read_mask_threshold(tmp_path):
    from PIL import Image

    arr = np.array([[0, 127], [128, 255]], dtype=np.uint8)
    Image.fromarray(arr, mode="L").save(tmp_path / "m.png")
    assert read_mask(tmp_path / "m.png").tolist() == [[[0.0, 0.0], [1.0, 1.0]]]


def test_rect_helper_has_inpaint_region():
    m = rect_mask()
    assert 0 < float(m.grid.sum()) < m.num_cells
