import numpy as np
import pytest

from cdcl.model import Domain, EncoderConfig, Mode, encode, init_model


def random_unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def small_config(batch_norm=False, per_domain_bn=False, bottleneck=False, activation="tanh"):
    return EncoderConfig(input_dim=4, hidden_dims=(6, 5), feature_dim=3, activation=activation,
                         batch_norm=batch_norm, per_domain_bn=per_domain_bn, bottleneck=bottleneck)


def train_batch(model, x, domain, labels=None):
    return encode(model, x, domain, Mode.TRAIN, track_stats=False, labels=labels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return init_model(small_config(), 3, seed=0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
