import numpy as np
import pytest
import torch

from digression.backend.base import HiddenStateBundle
from digression.centroid import (
    centroid_distance, draw_seeds, estimate_centroid, load_centroid, sample_draw, save_centroid,
)
from digression.errors import ContractViolation, ValidationError
from digression.masking import make_context
from digression.timesteps import TimestepDistribution


@pytest.fixture(scope="module")
def tau(backend):
    return backend.null_embedding(8)


def test_single_sample_equals_its_bundle(backend, pair, tau):
    x, m = pair
    dist = TimestepDistribution()
    c = estimate_centroid(backend, x, m, tau, dist, sample_seeds=[42])
    t, z = sample_draw(42, dist, backend.spec.latent_shape, backend.dtype)
    out = backend.forward(z, t, make_context(x, m)[None], m.latent, tau)
    for name, h in out.hidden:
        assert torch.equal(c.mean(name), h[0].double())


def test_duplicate_draws_have_zero_variance(backend, pair, tau):
    x, m = pair
    c = estimate_centroid(backend, x, m, tau, sample_seeds=[7, 7, 7, 7])
    for name in c.layer_ids:
        assert float(c.variance(name).abs().max()) == 0.0


def test_half_sample_linearity(backend64, pair64):
    x, m = pair64
    tau = backend64.null_embedding(8)
    seeds = draw_seeds(0, 16)
    full = estimate_centroid(backend64, x, m, tau, sample_seeds=seeds, chunk=5)
    a = estimate_centroid(backend64, x, m, tau, sample_seeds=seeds[:8])
    b = estimate_centroid(backend64, x, m, tau, sample_seeds=seeds[8:])
    for name in full.layer_ids:
        assert torch.allclose((a.mean(name) + b.mean(name)) / 2, full.mean(name), rtol=1e-12, atol=1e-14)


def test_chunking_does_not_change_result(backend64, pair64):
    x, m = pair64
    tau = backend64.null_embedding(8)
    a = estimate_centroid(backend64, x, m, tau, n_samples=6, chunk=6)
    b = estimate_centroid(backend64, x, m, tau, n_samples=6, chunk=4)
    for name in a.layer_ids:
        assert torch.allclose(a.mean(name), b.mean(name), rtol=1e-12, atol=1e-14)


def test_centroid_is_frozen(backend, pair, tau):
    x, m = pair
    c = estimate_centroid(backend, x, m, tau, n_samples=2)
    with pytest.raises(Exception):
        c.sample_count = 3
    assert not c.means[0][1].requires_grad


def _bundle(arrays):
    return HiddenStateBundle([(k, torch.as_tensor(v, dtype=torch.float64)) for k, v in arrays.items()])


def test_distance_identity_and_unit_case():
    rng = np.random.default_rng(0)
    arrays = {"a": rng.standard_normal((1, 7)), "b": rng.standard_normal((1, 3))}
    b = _bundle(arrays)
    assert float(centroid_distance(b, b)[0]) == 0.0
    zero = _bundle({k: np.zeros_like(v) for k, v in arrays.items()})
    ones = _bundle({k: np.ones_like(v) for k, v in arrays.items()})
    assert float(centroid_distance(zero, ones)[0]) == 10.0


def test_distance_hand_summed_with_weights():
    rng = np.random.default_rng(1)
    c = _bundle({"a": rng.standard_normal((1, 5)), "b": rng.standard_normal((1, 4))})
    h = _bundle({"a": rng.standard_normal((3, 5)), "b": rng.standard_normal((3, 4))})
    w = {"a": 0.5, "b": 2.0}
    expected = sum(w[k] * ((c[k] - h[k]) ** 2).sum(dim=1) for k in w)
    assert torch.allclose(centroid_distance(c, h, w), expected, rtol=1e-14)
    assert bool((centroid_distance(c, h) >= 0).all())


def test_distance_contract_errors():
    c = _bundle({"a": np.zeros((1, 5))})
    with pytest.raises(ContractViolation):
        centroid_distance(c, _bundle({"b": np.zeros((1, 5))}))
    with pytest.raises(ContractViolation):
        centroid_distance(c, _bundle({"a": np.zeros((1, 4))}))
    with pytest.raises(ContractViolation):
        centroid_distance(c, c, {"zzz": 1.0})


def test_save_load_round_trip(tmp_path, backend, pair, tau):
    x, m = pair
    c = estimate_centroid(backend, x, m, tau, n_samples=3)
    stem = save_centroid(c, tmp_path / "phi")
    again = load_centroid(stem)
    assert again.layer_ids == c.layer_ids
    assert again.config_hash == c.config_hash and again.context_hash == c.context_hash
    for name in c.layer_ids:
        assert torch.equal(again.mean(name), c.mean(name))
        assert torch.equal(again.variance(name), c.variance(name))


def test_needs_samples(backend, pair, tau):
    x, m = pair
    with pytest.raises(ValidationError):
        estimate_centroid(backend, x, m, tau, n_samples=0)


def test_standard_error_scaling(backend, pair, tau):
    x, m = pair
    se = {n: estimate_centroid(backend, x, m, tau, n_samples=n, seed=11) for n in (8, 32, 128)}
    for layer in se[8].layer_ids:
        for lo, hi in ((8, 32), (32, 128)):
            ratio = se[lo].standard_error(layer) / se[hi].standard_error(layer)
            assert abs(ratio / 2.0 - 1) < 0.3, (layer, lo, hi, ratio)
