import numpy as np
import pytest

from honestforest.causal_forest import ForestParams
from honestforest.effects import fit
from honestforest.synthetic_dgp import generate, validation_config


def write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="session")
def small_world():
    """n=1500 validation draw with its oracle."""
    cfg = validation_config(n=1500, seed=3)
    sample, oracle = generate(cfg)
    return cfg, sample, oracle


@pytest.fixture(scope="session")
def small_fit(small_world):
    _, sample, _ = small_world
    return sample, fit(sample, ForestParams(n_trees=60, seed=5), threads=2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)
