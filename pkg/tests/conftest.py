import numpy as np
import pytest

from dropout_rashomon.models import ModelParams, NetworkSpec, init_params
from dropout_rashomon.numerics import Rng
from dropout_rashomon.synth import gaussian_blobs


def random_params(spec: NetworkSpec, seed: int, scale: float = 1.0) -> ModelParams:
    rng = np.random.default_rng(seed)
    weights = [scale * rng.standard_normal((a, b)) for a, b in zip(spec.widths[:-1], spec.widths[1:])]
    biases = [rng.standard_normal(b) for b in spec.widths[1:]] if spec.use_bias else None
    return ModelParams(weights, biases)


@pytest.fixture(scope="session")
def blobs():
    return gaussian_blobs(n=200, d=4, n_classes=2, separation=1.5, seed=5)


@pytest.fixture(scope="session")
def small_net(blobs):
    from dropout_rashomon.training import TrainConfig, sgd_train

    spec = NetworkSpec((blobs.d, 16, 2))
    params = sgd_train(spec, init_params(spec, Rng(1)), blobs,
                       TrainConfig(epochs=60, learning_rate=0.1, batch_size=20, seed=1))
    return spec, params
