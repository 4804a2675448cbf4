import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from localnoise.diffnet.layers import Layer, Params, Shape, make_layer
from localnoise.errors import NetworkBuildError, ShapeMismatchError
from localnoise.helpers.general_utils import substream
from localnoise.pipeline.schemas import LayerSpec

LOGGER = logging.getLogger(__name__)


def default_layers(num_classes: int) -> List[LayerSpec]:
    """conv3x3(8) -> relu -> pool2 -> conv3x3(16) -> relu -> pool2 -> flatten -> dense."""
    return [
        LayerSpec.conv2d(kernel=3, out_channels=8, padding=1),
        LayerSpec.relu(),
        LayerSpec.maxpool2d(window=2),
        LayerSpec.conv2d(kernel=3, out_channels=16, padding=1),
        LayerSpec.relu(),
        LayerSpec.maxpool2d(window=2),
        LayerSpec.flatten(),
        LayerSpec.dense(out_features=num_classes),
    ]


def trace_shapes(layers: Sequence[Layer], input_shape: Tuple[int, int, int], num_classes: int) -> List[Shape]:
    """Per-layer input shapes (channel-first); raises unless the stack ends in a num_classes vector."""
    h, w, c = input_shape
    shape: Shape = (c, h, w)
    shapes = []
    for layer in layers:
        shapes.append(shape)
        shape = layer.output_shape(shape)
    if shape != (num_classes,):
        raise NetworkBuildError(
            f"layer stack ends in shape {shape}, expected a logit vector ({num_classes},)", field="layers"
        )
    return shapes


def forward_layers(layers: Sequence[Layer], params: Sequence[Params], x: np.ndarray) -> Tuple[np.ndarray, list]:
    caches = []
    for layer, p in zip(layers, params):
        x, cache = layer.forward(p, x)
        caches.append(cache)
    return x, caches


def backward_layers(
    layers: Sequence[Layer], params: Sequence[Params], caches: list, dy: np.ndarray, need_params: bool = True
) -> Tuple[np.ndarray, List[Params]]:
    grads: List[Params] = [{} for _ in layers]
    for i in reversed(range(len(layers))):
        dy, grads[i] = layers[i].backward(params[i], caches[i], dy, need_params=need_params)
    return dy, grads


class Network:
    """Immutable layer stack with parameters. Inputs are [h, w, c] images."""

    def __init__(
        self,
        layers: Sequence[LayerSpec],
        params: Sequence[Params],
        input_shape: Tuple[int, int, int],
        num_classes: int,
    ):
        self.specs: Tuple[LayerSpec, ...] = tuple(layers)
        self.input_shape: Tuple[int, int, int] = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        self.layers: Tuple[Layer, ...] = tuple(make_layer(spec) for spec in self.specs)
        shapes = trace_shapes(self.layers, self.input_shape, self.num_classes)

        if len(params) != len(self.layers):
            raise NetworkBuildError(f"got {len(params)} parameter groups for {len(self.layers)} layers", field="params")
        frozen = []
        for i, (layer, group, shape) in enumerate(zip(self.layers, params, shapes)):
            expected = layer.param_shapes(shape)
            if set(group) != set(expected):
                raise NetworkBuildError(f"layer {i} ({layer.spec.kind}) expects params {sorted(expected)}", field="params")
            arrays = {}
            for name, value in group.items():
                value = np.array(value, copy=True)
                if value.shape != expected[name]:
                    raise NetworkBuildError(
                        f"layer {i} {name} has shape {value.shape}, expected {expected[name]}", field="params"
                    )
                value.setflags(write=False)
                arrays[name] = value
            frozen.append(arrays)
        self.params: Tuple[Params, ...] = tuple(frozen)

    @classmethod
    def build(
        cls,
        layers: Sequence[LayerSpec],
        input_shape: Tuple[int, int, int],
        num_classes: int,
        seed: int,
        dtype=np.float32,
    ) -> "Network":
        """Glorot-uniform weights and zero biases drawn from the seed's "init" stream."""
        built = [make_layer(spec) for spec in layers]
        shapes = trace_shapes(built, tuple(input_shape), num_classes)
        rng = substream(seed, "init")
        params = [layer.init_params(shape, rng, np.dtype(dtype)) for layer, shape in zip(built, shapes)]
        return cls(layers, params, input_shape, num_classes)

    @property
    def dtype(self) -> np.dtype:
        for group in self.params:
            for value in group.values():
                return value.dtype
        return np.dtype(np.float32)

    def astype(self, dtype) -> "Network":
        params = [{name: value.astype(dtype) for name, value in group.items()} for group in self.params]
        return Network(self.specs, params, self.input_shape, self.num_classes)

    def with_params(self, params: Sequence[Params]) -> "Network":
        return Network(self.specs, params, self.input_shape, self.num_classes)

    def check_input(self, image: np.ndarray) -> None:
        if tuple(image.shape) != self.input_shape:
            raise ShapeMismatchError(
                f"image shape {tuple(image.shape)} does not match network input shape {self.input_shape}",
                field="image",
            )

    def to_batch(self, images: np.ndarray) -> np.ndarray:
        """[N, h, w, c] (or one [h, w, c]) -> channel-first batch in the network dtype."""
        if images.ndim == 3:
            images = images[None]
        return np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=self.dtype)

    def logits_batch(self, images: np.ndarray) -> np.ndarray:
        if tuple(images.shape[1:]) != self.input_shape:
            raise ShapeMismatchError(
                f"batch image shape {tuple(images.shape[1:])} does not match network input shape {self.input_shape}",
                field="images",
            )
        logits, _ = forward_layers(self.layers, self.params, self.to_batch(images))
        return logits


def forward(net: Network, image: np.ndarray) -> np.ndarray:
    """Pre-softmax logits M(x) for one [h, w, c] image."""
    net.check_input(image)
    logits, _ = forward_layers(net.layers, net.params, net.to_batch(image))
    return logits[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits)
    if logits.size == 0:
        raise ShapeMismatchError("softmax of an empty logit vector", field="logits")
    shifted = np.exp(logits - np.max(logits, axis=-1, keepdims=True))
    return shifted / np.sum(shifted, axis=-1, keepdims=True)


def predict(net: Network, image: np.ndarray) -> Tuple[int, float]:
    """(class, probability); np.argmax resolves ties to the lowest index."""
    probs = softmax(forward(net, image))
    cls = int(np.argmax(probs))
    return cls, float(probs[cls])


def predict_logits(logits: np.ndarray) -> Tuple[int, float]:
    probs = softmax(logits)
    cls = int(np.argmax(probs))
    return cls, float(probs[cls])


def input_gradient(net: Network, image: np.ndarray, class_weights: np.ndarray) -> np.ndarray:
    """d(class_weights . logits)/d(pixels), shaped like the image.

    One-hot weights give dM(y=c|x)/dx; +1 at the target and -1 at the reference
    give the target-minus-reference objective gradient in a single pass.
    """
    _, caches = forward_with_cache(net, image)
    return gradient_from_cache(net, caches, class_weights)


def forward_with_cache(net: Network, image: np.ndarray) -> Tuple[np.ndarray, list]:
    """Logits plus the layer caches, so a caller can pick class weights from the
    logits and then backpropagate without a second forward pass."""
    net.check_input(image)
    logits, caches = forward_layers(net.layers, net.params, net.to_batch(image))
    return logits[0], caches


def gradient_from_cache(net: Network, caches: list, class_weights: np.ndarray) -> np.ndarray:
    class_weights = np.asarray(class_weights)
    if class_weights.shape != (net.num_classes,):
        raise ShapeMismatchError(
            f"class_weights shape {class_weights.shape} does not match ({net.num_classes},)", field="class_weights"
        )
    dy = class_weights.astype(net.dtype)[None]
    dx, _ = backward_layers(net.layers, net.params, caches, dy, need_params=False)
    return dx[0].transpose(1, 2, 0)


def one_hot(num_classes: int, index: int, value: float = 1.0, dtype=np.float64) -> np.ndarray:
    weights = np.zeros(num_classes, dtype=dtype)
    weights[index] = value
    return weights


def accuracy(net: Network, images: np.ndarray, labels: np.ndarray, limit: Optional[int] = None) -> float:
    """Fraction of images whose `predict` class equals the label."""
    count = len(labels) if limit is None else min(limit, len(labels))
    if count == 0:
        return 0.0
    hits = sum(int(predict(net, images[i])[0] == int(labels[i])) for i in range(count))
    return hits / count
