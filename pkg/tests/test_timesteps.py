import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from digression.backend.base import HiddenStateBundle
from digression.errors import ValidationError
from digression.masking import make_context
from digression.timesteps import (
    TimestepDistribution, collect_hidden_trajectory, eigenfeature_similarity, extreme_resolution_layers,
    first_component, sample_timestep,
)


def _bundle(vec, t, example=0, layer="L"):
    return HiddenStateBundle([(layer, torch.as_tensor(vec, dtype=torch.float64)[None])], t, {"example": example})


def test_default_distribution():
    d = TimestepDistribution()
    assert (d.mean, d.std, d.clamp_range) == (720, 5.8, (1, 1000))
    assert TimestepDistribution.for_backend(1000).mean == 720


def test_std_must_be_positive():
    with pytest.raises(ValidationError):
        TimestepDistribution(720, 0.0)
    with pytest.raises(ValidationError):
        TimestepDistribution(720, 5.8, (0, 1000))


def test_narrow_window_is_constant():
    d = TimestepDistribution(720, 1e-9)
    assert set(sample_timestep(d, np.random.default_rng(0), 100).tolist()) == {720}


def test_sampling_mean_and_support():
    d = TimestepDistribution()
    t = sample_timestep(d, np.random.default_rng(0), 100_000)
    assert abs(t.mean() - 720) < 0.1
    assert t.min() >= 1 and t.max() <= 1000


def test_clamping_keeps_support():
    d = TimestepDistribution(995, 50)
    t = sample_timestep(d, np.random.default_rng(1), 10_000)
    assert t.max() == 1000 and t.min() >= 1


def test_trajectory_counts_and_determinism(backend, pair):
    x, m = pair
    C, M, tau = make_context(x, m)[None], m.latent, backend.null_embedding(8)
    one = collect_hidden_trajectory(backend, C, M, tau, [500], 1)
    assert len(one) == 1
    a = collect_hidden_trajectory(backend, C, M, tau, [100, 500, 900], 2)
    b = collect_hidden_trajectory(backend, C, M, tau, [100, 500, 900], 2)
    assert len(a) == 6
    assert all(p.equal(q) for p, q in zip(a, b))
    assert [p.timestep for p in a] == [100, 500, 900] * 2
    with pytest.raises(ValidationError):
        collect_hidden_trajectory(backend, C, M, tau, [0], 1)


def test_identical_states_are_degenerate():
    v = np.arange(6.0)
    rep = eigenfeature_similarity([_bundle(v, 10), _bundle(v, 20)])
    assert rep.degenerate["L"]
    assert rep.curves["L"].tolist() == [1.0, 1.0]


def test_antipodal_pair():
    v = np.array([1.0, -2.0, 0.5, 3.0])
    rep = eigenfeature_similarity([_bundle(v, 10), _bundle(-v, 20)])
    assert sorted(np.round(rep.curves["L"], 12).tolist()) == [-1.0, 1.0]


def test_pc1_unit_norm_and_matches_eigh():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((10, 40)) @ np.diag(np.linspace(3, 0.1, 40))
    pc, var, degen = first_component(x)
    assert not degen
    assert abs(np.linalg.norm(pc) - 1) < 1e-6
    centred = x - x.mean(0)
    w, v = np.linalg.eigh(centred.T @ centred / len(x))
    assert abs(abs(pc @ v[:, -1]) - 1) < 1e-8
    assert np.isclose(var, w[-1], rtol=1e-8)
    # no other unit direction captures more variance than PC1
    for d in rng.standard_normal((50, 40)):
        d /= np.linalg.norm(d)
        assert np.var(centred @ d) <= var + 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_positive_scaling_leaves_curve_unchanged(seed, scale):
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((6, 12))
    a = eigenfeature_similarity([_bundle(r, t) for t, r in enumerate(rows, 1)])
    b = eigenfeature_similarity([_bundle(scale * r, t) for t, r in enumerate(rows, 1)])
    assert np.allclose(a.curves["L"], b.curves["L"], atol=1e-9)


def test_curves_average_over_examples():
    rng = np.random.default_rng(3)
    groups = [rng.standard_normal((4, 5)) for _ in range(3)]
    bundles = [_bundle(r, t, example=k) for k, g in enumerate(groups) for t, r in enumerate(g, 1)]
    rep = eigenfeature_similarity(bundles)
    singles = [eigenfeature_similarity([_bundle(r, t) for t, r in enumerate(g, 1)]).curves["L"] for g in groups]
    assert np.allclose(rep.curves["L"], np.mean(singles, axis=0))
    assert len(list(rep.rows())) == 4


def test_extreme_layers(backend):
    assert extreme_resolution_layers(backend) == ["down.16", "mid.8"]
