import numpy as np
import pytest

from repbias.micronet import Conv, FullyConnected, Flatten, MicroNet, NetworkConfig, ReLU


def tiny_config(rng, n_attr=None):
    """Random small conv net; shapes vary with the generator."""
    c_in = int(rng.integers(1, 3))
    size = int(rng.integers(5, 8))
    c1 = int(rng.integers(2, 4))
    c2 = int(rng.integers(2, 4))
    k1, k2 = 3, int(rng.integers(1, 3))
    side = size - k1 + 1 - k2 + 1
    hidden = int(rng.integers(3, 7))
    n = n_attr or int(rng.integers(1, 4))
    layers = (Conv(k1, c_in, c1), ReLU(), Conv(k2, c1, c2), ReLU(), Flatten(),
              FullyConnected(c2 * side * side, hidden), ReLU(), FullyConnected(hidden, n))
    return NetworkConfig((c_in, size, size), layers, n)


def tiny_net(seed, n_attr=None):
    rng = np.random.default_rng(seed)
    cfg = tiny_config(rng, n_attr)
    net = MicroNet.initialize(cfg, rng)
    images = rng.normal(size=(4, *cfg.input_shape))
    return net, images


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# (criterion, passed, detail) lines filled in by test_acceptance.py
ACCEPTANCE: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
