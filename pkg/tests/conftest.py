import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sparsenet.layers import LayerSpec, Network, NetworkSpec

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_spec(channels=2, hw=(6, 5), classes=3, conv_out=3, local_out=4, fc_out=5, dropout=0.3):
    """conv -> relu -> pool -> local -> relu -> fc -> relu -> dropout -> cls -> softmax."""
    layers = [
        LayerSpec("c1", "conv", kernel=3, padding=1, out_channels=conv_out),
        LayerSpec("reluc1", "relu"),
        LayerSpec("pool1", "pool", kernel=2, stride=2),
        LayerSpec("l1", "local", kernel=2, out_channels=local_out),
        LayerSpec("relul1", "relu"),
        LayerSpec("f", "fc", out_channels=fc_out),
        LayerSpec("reluf", "relu"),
        LayerSpec("dropf", "dropout", dropout_rate=dropout),
        LayerSpec("cls", "fc", out_channels=classes),
        LayerSpec("softmax", "softmax"),
    ]
    return NetworkSpec((hw[0], hw[1], channels), layers, classes)


def random_net(spec, seed=0, scale=1.0):
    net = Network.initialize(spec, np.random.default_rng(seed), scale)
    rng = np.random.default_rng(seed + 1)
    for p in net.params.values():
        p["b"][...] = rng.normal(0, 0.1, size=p["b"].shape)
    return net


@pytest.fixture
def spec():
    return tiny_spec()


@pytest.fixture
def net(spec):
    return random_net(spec)


@pytest.fixture
def batch(spec):
    rng = np.random.default_rng(42)
    return rng.normal(size=(7, *spec.input_shape)), rng.integers(0, spec.classes, size=7)


# Acceptance criteria record one line each; they are printed after the run.
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
