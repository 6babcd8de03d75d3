import json
from pathlib import Path

import numpy as np
import pytest

from qsched.denoiser import GaussianMixture, GmmDenoiser, MLPDenoiser, TimeEmbedding
from qsched.model import Denoiser
from qsched.schedule import build_schedule
from qsched.streams import keyed_generator

GOLDEN = Path(__file__).resolve().parent / "golden"


def pytest_addoption(parser):
    parser.addoption(
        "--update-golden", action="store_true", default=False,
        help="re-record the trained-model fixtures under tests/golden",
    )


def load_golden(name):
    return json.loads((GOLDEN / f"{name}.json").read_text(encoding="utf-8"))


@pytest.fixture
def recorded(pytestconfig):
    """
    Compare a flat mapping of floats with its recorded fixture.

    Values that depend on torch training are recorded with --update-golden
    on the reference machine; until then the comparison is skipped.
    """
    update = pytestconfig.getoption("--update-golden")

    def check(name, values, rel=1e-6):
        path = GOLDEN / f"{name}.json"
        if update:
            text = json.dumps(values, indent=2, sort_keys=True) + "\n"
            path.write_text(text, encoding="utf-8")
        elif not path.exists():
            pytest.skip(f"{path.name} is not recorded, run with --update-golden")
        else:
            assert values == pytest.approx(load_golden(name), rel=rel)

    return check


@pytest.fixture(scope="session")
def schedule():
    return build_schedule(0.0085, 0.012, 1000)


@pytest.fixture(scope="session")
def gmm():
    return GaussianMixture(
        weights=[0.5, 0.5],
        means=[[-1.5, -1.5], [1.5, 1.5]],
        component_stds=[0.35, 0.35],
    )


@pytest.fixture(scope="session")
def point_mass():
    return GaussianMixture(weights=[1.0], means=[[0.7, -0.3]], component_stds=[1e-4])


@pytest.fixture(scope="session")
def exact(gmm, schedule):
    return GmmDenoiser(gmm, schedule)


def random_mlp(seed=0, dim=2, width=32, hidden_layers=2, n_train=1000):
    rng = keyed_generator(seed, "test-mlp")
    embedding = TimeEmbedding(8, n_train)
    widths = [dim + embedding.size] + [width] * hidden_layers + [dim]
    weights = [
        rng.standard_normal((a, b)) / np.sqrt(a) for a, b in zip(widths, widths[1:])
    ]
    biases = [0.1 * rng.standard_normal(b) for b in widths[1:]]
    return MLPDenoiser(weights, biases, embedding, activation="silu", seed=seed)


@pytest.fixture(scope="session")
def mlp():
    return random_mlp()


class ConstantDenoiser(Denoiser):
    """Returns the same epsilon for every input."""

    def __init__(self, epsilon):
        self.epsilon = np.asarray(epsilon, dtype=np.float64)

    @property
    def dim(self):
        return self.epsilon.shape[0]

    def predict(self, x_t, t, sample_ids):
        return np.tile(self.epsilon, (x_t.shape[0], 1))


class FailingDenoiser(Denoiser):
    def __init__(self, dim=2):
        self._dim = dim

    @property
    def dim(self):
        return self._dim

    def predict(self, x_t, t, sample_ids):
        raise AssertionError("denoiser must not be evaluated")
