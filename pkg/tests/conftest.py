"""Shared builders for small models, datasets and federations."""

from pathlib import Path

import numpy as np
import pytest

from fuia_lab.data import Dataset, partition, synthesize
from fuia_lab.fed import FLConfig
from fuia_lab.nn import ModelSpec, init_params
from fuia_lab.rng import derive_rng

EXAMPLE_INI = Path(__file__).resolve().parents[1] / "docs" / "example.ini"
VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


def random_mlp(rng: np.random.Generator, max_layers: int = 3, max_units: int = 64, activation="sigmoid"):
    """A random MLP with at most ``max_layers`` weight layers and its parameters."""
    n_hidden = int(rng.integers(0, max_layers))
    hidden = [int(rng.integers(2, max_units + 1)) for _ in range(n_hidden)]
    side = int(rng.integers(2, 5))
    classes = int(rng.integers(2, 6))
    spec = ModelSpec.mlp((1, side, side), hidden, classes, activation)
    return spec, init_params(spec, rng)


def linear_softmax(d: int = 16, n: int = 4, seed: int = 0):
    spec = ModelSpec.mlp((1, 1, d), [], n)
    return spec, init_params(spec, derive_rng(seed, "linear"))


def toy_federation(seed: int = 0, n_clients: int = 10, per_client: int = 8, classes: int = 10, shape=(1, 6, 6)):
    """Synthetic data split into equal client shards."""
    ds = synthesize(classes, max(1, -(-n_clients * per_client // classes)), shape, seed)
    plan = partition(ds, n_clients, "count", seed, per_client=per_client)
    return plan.split(ds)


def by_class_federation(seed: int = 0, classes: int = 10, per_class: int = 8, shape=(1, 6, 6)):
    """Client ``c`` holds exactly the samples of class ``c``."""
    ds = synthesize(classes, per_class, shape, seed)
    return [ds.of_classes([c]) for c in range(classes)]


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def linear_grads(W, b, x, y):
    """Mean cross-entropy gradients of a linear-softmax model, written out by hand."""
    p = softmax(x @ W.T + b)
    r = p - np.eye(W.shape[0])[y]
    return r.T @ x / x.shape[0], r.mean(axis=0)


@pytest.fixture
def small_cfg():
    return FLConfig(n_clients=10, participation=0.5, local_epochs=2, rounds=4, lr=0.5, seed=3)


@pytest.fixture
def tiny_dataset():
    rng = np.random.default_rng(7)
    return Dataset(rng.uniform(size=(6, 1, 3, 3)), [0, 1, 2, 0, 1, 2], 3)


# Overrides on top of docs/example.ini used by the pipeline tests and the
# acceptance suite. The class scenario trains from scratch: a pretrained
# model has already seen the forgotten class, which blurs the output-layer
# signal the class inference reads.
CLASS_SCENARIO = {
    "data": {"pretrain_fraction": 0.0, "per_class": 32, "partition": "iid"},
    "fl": {"rounds": 20, "lr": 1.0},
    "unlearn": {"scenario": "class", "method": "retrain"},
}
CLIENT_SCENARIO = {"data": {"per_client": 1}, "unlearn": {"scenario": "client", "method": "retrain"}}
FAST = {
    "experiment": {"trials": 2},
    "data": {"pretrain_epochs": 5},
    "fl": {"rounds": 3},
    "attack": {"iterations": 40},
    "report": {"plots": False},
}


def example_config(out, *changes):
    """docs/example.ini with each ``{section: {key: value}}`` applied in turn."""
    from fuia_lab.config import load_config

    cfg = load_config(EXAMPLE_INI)
    for ch in changes:
        cfg = cfg.updated(ch)
    return cfg.with_overrides(out=str(out))
