import numpy as np
import pytest

from localnoise.diffnet.dataset import Dataset, default_datasets
from localnoise.diffnet.network import Network, default_layers
from localnoise.diffnet.trainer import Trainer
from localnoise.pipeline.schemas import LayerSpec, TrainConfig


def small_layers(num_classes: int = 3):
    return [
        LayerSpec.conv2d(kernel=3, out_channels=4, padding=1),
        LayerSpec.relu(),
        LayerSpec.maxpool2d(window=2),
        LayerSpec.flatten(),
        LayerSpec.dense(out_features=num_classes),
    ]


def linear_net(weight: np.ndarray, bias, input_shape=(16, 16, 3)) -> Network:
    """flatten -> dense with the given (h*w*c, k) weight; flatten order is channel-first."""
    bias = np.asarray(bias, dtype=np.float32)
    return Network(
        [LayerSpec.flatten(), LayerSpec.dense(out_features=len(bias))],
        [{}, {"weight": np.asarray(weight, dtype=np.float32), "bias": bias}],
        input_shape,
        len(bias),
    )


def constant_net(bias, input_shape=(16, 16, 3)) -> Network:
    h, w, c = input_shape
    return linear_net(np.zeros((h * w * c, len(bias))), bias, input_shape)


def channel_zero_net(input_shape=(16, 16, 3), slope: float = 0.01, bias=(5.0, 0.0)) -> Network:
    """Two classes; class 1's logit is slope * (sum of channel 0), class 0's is a constant."""
    h, w, c = input_shape
    weight = np.zeros((h * w * c, 2))
    weight[: h * w, 1] = slope
    return linear_net(weight, bias, input_shape)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_net():
    return Network.build(small_layers(), (16, 16, 3), 3, seed=1)


@pytest.fixture
def wide_net():
    """32x32 input, the default sweep geometry."""
    return Network.build(small_layers(), (32, 32, 3), 3, seed=2)


@pytest.fixture
def image16(rng):
    return rng.uniform(0.0, 1.0, size=(16, 16, 3)).astype(np.float32)


@pytest.fixture
def image32(rng):
    return rng.uniform(0.0, 1.0, size=(32, 32, 3)).astype(np.float32)


@pytest.fixture
def flat_train_set():
    images = np.full((4, 16, 16, 3), 0.5, dtype=np.float32)
    return Dataset(images=images, labels=np.zeros(4, dtype=np.int64), split="train", num_classes=2)


@pytest.fixture(scope="session")
def victim_data():
    return default_datasets(seed=42)


@pytest.fixture(scope="session")
def victim(victim_data):
    train, heldout = victim_data
    net = Network.build(default_layers(8), (32, 32, 3), 8, seed=42)
    trainer = Trainer(TrainConfig(seed=42))
    trained = trainer.fit(net, train, heldout)
    return trained, trainer.history
