import logging
from typing import List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from localnoise.diffnet.dataset import Dataset
from localnoise.diffnet.network import Network, accuracy, backward_layers, forward_layers, softmax
from localnoise.errors import ConfigError
from localnoise.helpers.general_utils import substream
from localnoise.pipeline.schemas import EpochMetrics, TrainConfig

LOGGER = logging.getLogger(__name__)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    probs = softmax(logits)
    n = len(labels)
    picked = np.clip(probs[np.arange(n), labels], 1e-12, 1.0)
    loss = float(-np.mean(np.log(picked)))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1
    return loss, dlogits / n


class Trainer:
    """Minibatch SGD on cross-entropy. Shuffling comes from the seed's "train/shuffle" stream."""

    def __init__(self, cfg: TrainConfig, progress: bool = False):
        self.cfg = cfg
        self.progress = progress
        self.history: List[EpochMetrics] = []

    def fit(self, net: Network, data: Dataset, heldout: Optional[Dataset] = None) -> Network:
        if len(data) == 0:
            raise ConfigError("cannot train on an empty dataset", field="data")
        if int(np.max(data.labels)) >= net.num_classes:
            raise ConfigError(
                f"dataset label {int(np.max(data.labels))} out of range for {net.num_classes} classes", field="data"
            )

        rng = substream(self.cfg.seed, "train/shuffle")
        params = [{name: value.copy() for name, value in group.items()} for group in net.params]
        lr = net.dtype.type(self.cfg.learning_rate)
        inputs = net.to_batch(data.images)
        labels = data.labels.astype(np.int64)
        n = len(labels)
        self.history = []

        epochs = tqdm(range(1, self.cfg.epochs + 1), desc="train", disable=not self.progress)
        for epoch in epochs:
            order = rng.permutation(n)
            total_loss = 0.0
            for start in range(0, n, self.cfg.batch_size):
                batch = order[start:start + self.cfg.batch_size]
                logits, caches = forward_layers(net.layers, params, inputs[batch])
                loss, dlogits = cross_entropy(logits, labels[batch])
                _, grads = backward_layers(net.layers, params, caches, dlogits.astype(net.dtype))
                for group, group_grads in zip(params, grads):
                    for name, grad in group_grads.items():
                        group[name] -= lr * grad
                total_loss += loss * len(batch)

            trained = net.with_params(params)
            metrics = EpochMetrics(
                epoch=epoch,
                loss=total_loss / n,
                train_accuracy=float(np.mean(np.argmax(trained.logits_batch(data.images), axis=1) == labels)),
                heldout_accuracy=accuracy(trained, heldout.images, heldout.labels) if heldout is not None else None,
            )
            self.history.append(metrics)
            LOGGER.info(
                "epoch %d loss=%.4f train_acc=%.4f heldout_acc=%s",
                epoch,
                metrics.loss,
                metrics.train_accuracy,
                "n/a" if metrics.heldout_accuracy is None else f"{metrics.heldout_accuracy:.4f}",
            )
        return net.with_params(params)


def train(net: Network, data: Dataset, cfg: TrainConfig) -> Network:
    return Trainer(cfg).fit(net, data)
