import numpy as np
import pytest

from conftest import small_layers
from localnoise.diffnet.dataset import Dataset, synth_dataset
from localnoise.diffnet.network import Network, accuracy
from localnoise.diffnet.trainer import Trainer, cross_entropy, train
from localnoise.errors import ConfigError
from localnoise.pipeline.schemas import TrainConfig


@pytest.fixture
def tiny_train():
    return synth_dataset(seed=3, n_per_class=4, num_classes=3, image_size=16)


def params_equal(a: Network, b: Network) -> bool:
    return all(np.array_equal(ga[name], gb[name]) for ga, gb in zip(a.params, b.params) for name in ga)


def test_cross_entropy_gradient_sums_to_zero():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 3.0]])
    loss, dlogits = cross_entropy(logits, np.array([1, 2]))
    assert loss > 0
    np.testing.assert_allclose(dlogits.sum(axis=1), 0.0, atol=1e-12)


def test_zero_learning_rate_keeps_params(small_net, tiny_train):
    trained = train(small_net, tiny_train, TrainConfig(epochs=1, batch_size=4, learning_rate=0.0, seed=0))
    assert params_equal(trained, small_net)


def test_training_is_deterministic(tiny_train):
    cfg = TrainConfig(epochs=2, batch_size=5, learning_rate=0.05, seed=11)
    first = train(Network.build(small_layers(), (16, 16, 3), 3, seed=4), tiny_train, cfg)
    second = train(Network.build(small_layers(), (16, 16, 3), 3, seed=4), tiny_train, cfg)
    assert params_equal(first, second)


def test_training_does_not_touch_the_input_network(small_net, tiny_train):
    before = [{name: value.copy() for name, value in group.items()} for group in small_net.params]
    train(small_net, tiny_train, TrainConfig(epochs=1, batch_size=4, seed=0))
    for group, saved in zip(small_net.params, before):
        for name in group:
            assert np.array_equal(group[name], saved[name])


def test_history_records_every_epoch(small_net, tiny_train):
    heldout = synth_dataset(seed=3, n_per_class=2, num_classes=3, image_size=16, split="heldout")
    trainer = Trainer(TrainConfig(epochs=3, batch_size=4, seed=0))
    trained = trainer.fit(small_net, tiny_train, heldout)
    assert [m.epoch for m in trainer.history] == [1, 2, 3]
    assert trainer.history[-1].heldout_accuracy == accuracy(trained, heldout.images, heldout.labels)


def test_full_batch_loss_goes_down(tiny_train):
    net = Network.build(small_layers(), (16, 16, 3), 3, seed=6, dtype=np.float64)
    trainer = Trainer(TrainConfig(epochs=8, batch_size=len(tiny_train), learning_rate=0.05, seed=0))
    trainer.fit(net, tiny_train)
    losses = [m.loss for m in trainer.history]
    assert losses[-1] < losses[0]


def test_empty_dataset_rejected(small_net):
    empty = Dataset(
        images=np.zeros((0, 16, 16, 3), dtype=np.float32),
        labels=np.zeros(0, dtype=np.int64),
        split="train",
        num_classes=3,
    )
    with pytest.raises(ConfigError):
        train(small_net, empty, TrainConfig())


def test_negative_learning_rate_rejected():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-0.1)
