"""Shared fixtures.

The trained toy models are expensive (about a minute), so one session-wide
workspace is produced through the command-line entry point with the default
configuration and reused by every test that needs trained models.
"""
from __future__ import annotations

import numpy as np
import pytest

from latent_purify import cli, dataset
from latent_purify.rng import stream


def run_cli(*argv: str) -> int:
    return cli.main(list(argv))


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    out = tmp_path_factory.mktemp("run_a")
    for cmd in ("gen-data", "train-vae", "train-clf"):
        assert run_cli(cmd, "--output-dir", str(out)) == 0
    return out


@pytest.fixture(scope="session")
def config(workspace):
    return cli.load_config(None, str(workspace))


@pytest.fixture(scope="session")
def models(config):
    return cli._load_models(config)


@pytest.fixture(scope="session")
def vae(models):
    return models[0]


@pytest.fixture(scope="session")
def clf(models):
    return models[1]


@pytest.fixture(scope="session")
def splits(config):
    return tuple(cli._load_split(config, name) for name in ("train", "val", "test"))


@pytest.fixture(scope="session")
def val(splits):
    return splits[1]


@pytest.fixture(scope="session")
def eval_slice(config):
    return cli._eval_slice(config)[0]


@pytest.fixture(scope="session")
def small_ds():
    return dataset.generate(7, 4, 25)


@pytest.fixture
def rng():
    return stream(12345, "test")


def linear_problem(rng: np.random.Generator, dim: int = 256):
    """Binary linear classifier and an input strictly inside the pixel box."""
    w = rng.normal(size=dim)
    x = rng.uniform(0.3, 0.7, size=dim)
    margin = rng.uniform(0.2, 1.0)
    b = margin * np.linalg.norm(w) - w @ x  # distance to the hyperplane == margin
    weights = np.stack([np.zeros(dim), w], axis=1)
    bias = np.array([0.0, b])
    return weights, bias, x, 1, abs(w @ x + b) / np.linalg.norm(w)
