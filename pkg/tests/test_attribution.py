import json

import numpy as np
import pytest

from conftest import tiny_net
from repbias.attribution import (LocalSurrogate, MaskConfig, contributions, default_lambda, exhaustive_best,
                                 fidelity_loss, greedy_mask, heatmap, heatmap_to_pgm, inference_vector,
                                 local_surrogate, objective, stack_surrogates, write_heatmap)
from repbias.errors import EmptyInput, ShapeMismatch, ValidationError
from repbias.micronet import Conv, Flatten, FullyConnected, MicroNet, NetworkConfig, ReLU, forward
from repbias.tensor import load_tensor


def random_surrogate(rng, images=5, shape=(10,)):
    nu = rng.normal(size=(images, *shape))
    x = rng.normal(size=(images, *shape))
    beta = rng.normal(size=images)
    score = np.einsum("bi,bi->b", nu.reshape(images, -1), x.reshape(images, -1)) + beta
    return LocalSurrogate(nu, beta, score, x)


def test_surrogate_reconstructs_score():
    net, images = tiny_net(21)
    tr = forward(net, images)
    for i in range(net.attribute_count):
        s = local_surrogate(net, tr, i)
        nu, x = s.flat()
        assert np.allclose(np.einsum("bi,bi->b", nu, x) + s.beta, tr.scores[:, i], rtol=0, atol=1e-12)


def test_surrogate_single_image():
    net, images = tiny_net(22)
    tr = forward(net, images[0])
    s = local_surrogate(net, tr, 0)
    assert not s.batched
    assert float(np.dot(s.nu.ravel(), s.x.ravel())) + s.beta == pytest.approx(s.score, abs=1e-12)


def test_beta_is_composed_constant_for_linear_tail():
    cfg = NetworkConfig((1, 5, 5), (Conv(3, 1, 2), Flatten(), FullyConnected(18, 1)), 1)
    net = MicroNet.initialize(cfg, 3)
    rng = np.random.default_rng(3)
    for _ in range(3):
        s = local_surrogate(net, forward(net, rng.normal(size=(1, 5, 5))), 0)
        assert s.beta == pytest.approx(net.params[2]["bias"][0], abs=1e-12)


def test_scaling_within_activation_region():
    # Conv then ReLU then FC: scaling the image by c > 0 with zero biases keeps ReLU signs,
    # so nu is unchanged and nu.x scales by c.
    cfg = NetworkConfig((1, 5, 5), (Conv(3, 1, 2), ReLU(), Conv(1, 2, 2), ReLU(), Flatten(),
                                     FullyConnected(18, 1)), 1)
    net = MicroNet.initialize(cfg, 4)
    for p in net.params:
        if p is not None:
            p["bias"][...] = 0.0
    img = np.random.default_rng(4).normal(size=(1, 5, 5))
    a = local_surrogate(net, forward(net, img), 0)
    b = local_surrogate(net, forward(net, 2.5 * img), 0)
    assert np.array_equal(a.nu, b.nu)
    lin_a = float(np.dot(a.nu.ravel(), a.x.ravel()))
    lin_b = float(np.dot(b.nu.ravel(), b.x.ravel()))
    assert lin_b == pytest.approx(2.5 * lin_a, rel=1e-12)
    assert b.score == pytest.approx(lin_b + b.beta, abs=1e-12)


def test_stack_surrogates():
    net, images = tiny_net(23)
    singles = [local_surrogate(net, forward(net, im), 0) for im in images]
    stacked = stack_surrogates(singles)
    batch = local_surrogate(net, forward(net, images), 0)
    assert stacked.batched and len(stacked) == len(images)
    assert np.allclose(stacked.nu, batch.nu, rtol=0, atol=1e-13)
    with pytest.raises(EmptyInput):
        stack_surrogates([])


def test_lambda_zero_recovers_full_representation(rng):
    for _ in range(50):
        s = random_surrogate(rng)
        m = greedy_mask(s, MaskConfig(lam=0.0))
        assert m.fidelity == pytest.approx(0.0, abs=1e-20)


def test_huge_lambda_gives_empty_mask(rng):
    s = random_surrogate(rng)
    lin = contributions(s).sum(axis=1)
    m = greedy_mask(s, MaskConfig(lam=float(np.mean(lin * lin)) * 1.0001))
    assert m.selected_count == 0
    assert np.all(m.rho == 0)


def test_objective_trace_strictly_decreasing(rng):
    for _ in range(30):
        s = random_surrogate(rng, images=6, shape=(3, 2, 2))
        lam = default_lambda(s, factor=float(rng.uniform(0, 2)))
        m = greedy_mask(s, MaskConfig(lam=lam))
        assert all(b < a for a, b in zip(m.objective_trace, m.objective_trace[1:]))
        assert m.objective_trace[-1] == pytest.approx(objective(s, m.rho, lam), rel=1e-12, abs=1e-15)


def test_mask_entries_binary_and_capped(rng):
    s = random_surrogate(rng, shape=(12,))
    m = greedy_mask(s, MaskConfig(lam=0.0, max_units=3))
    assert set(np.unique(m.rho)) <= {0.0, 1.0}
    assert m.selected_count <= 3


def test_fidelity_never_worse_than_empty(rng):
    for _ in range(20):
        s = random_surrogate(rng)
        m = greedy_mask(s)
        assert m.fidelity <= fidelity_loss(s, np.zeros(10))


def test_greedy_deterministic_with_ties():
    nu = np.ones((2, 4))
    x = np.ones((2, 4))
    s = LocalSurrogate(nu, np.zeros(2), np.full(2, 4.0), x)
    a = greedy_mask(s, MaskConfig(lam=0.0))
    b = greedy_mask(s, MaskConfig(lam=0.0))
    assert a.selected == b.selected
    assert a.selected[0] == 0


def test_exhaustive_is_lower_bound(rng):
    s = random_surrogate(rng, shape=(6,))
    lam = default_lambda(s, 1.0)
    _, best = exhaustive_best(s, lam)
    assert objective(s, greedy_mask(s, MaskConfig(lam)).rho, lam) >= best - 1e-12


def test_mask_config_validation():
    with pytest.raises(ValidationError):
        MaskConfig(lam=-1.0)


def test_inference_vector(rng):
    s = random_surrogate(rng, images=3, shape=(2, 2, 2))
    assert np.array_equal(inference_vector(np.ones((2, 2, 2)), s), s.nu)
    assert np.all(inference_vector(np.zeros((2, 2, 2)), s) == 0)
    rho = np.zeros((2, 2, 2))
    rho[0, 1, 0] = rho[1, 0, 1] = 1
    v = inference_vector(rho, s)
    assert np.array_equal(v[:, rho == 1], s.nu[:, rho == 1])
    assert np.all(v[:, rho == 0] == 0)
    with pytest.raises(ShapeMismatch):
        inference_vector(np.ones(3), s)


def test_heatmap_definitions(rng):
    shape = (3, 4, 5)
    x = rng.normal(size=shape)
    nu = rng.normal(size=shape)
    assert np.all(heatmap(np.zeros(shape), x, shape) == 0)
    v = np.zeros(shape)
    v[2, 1, 3] = nu[2, 1, 3]
    h = heatmap(v, x, shape)
    expect = np.zeros((4, 5))
    expect[1, 3] = nu[2, 1, 3] * x[2, 1, 3]
    assert np.array_equal(h, expect)
    assert heatmap(nu, x, shape).sum() == pytest.approx(float(np.dot(nu.ravel(), x.ravel())), abs=1e-9)


def test_heatmap_pgm_export(tmp_path, rng):
    h = rng.normal(size=(4, 6))
    data, meta = heatmap_to_pgm(h)
    assert data.startswith(b"P5\n6 4\n255\n")
    pix = np.frombuffer(data[len(b"P5\n6 4\n255\n"):], dtype=np.uint8).reshape(4, 6)
    decoded = (pix - 127.5) / 127.5 * meta["scale"]
    assert np.max(np.abs(decoded - h)) <= meta["scale"] / 127.5
    paths = write_heatmap(tmp_path / "h", h)
    assert [p.suffix for p in paths] == [".pgm", ".json", ".bltn"]
    assert json.loads(paths[1].read_text())["scale"] == meta["scale"]
    assert np.array_equal(load_tensor(paths[2]), h)


def test_heatmap_zero_map_is_mid_grey():
    data, meta = heatmap_to_pgm(np.zeros((2, 2)))
    assert meta["scale"] == 0.0
    assert set(data[-4:]) == {128}
