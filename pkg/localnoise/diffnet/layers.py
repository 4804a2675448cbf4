"""Fixed layer vocabulary of the victim network.

Activations are batched channel-first arrays (N, C, H, W) until `Flatten`,
then (N, F). Layers hold no state: parameters come in as a dict and every
forward returns the cache its backward needs, so one parameter set can be
shared by many concurrent callers.
"""

from abc import ABC, abstractmethod
from typing import Any, Dict, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from localnoise.errors import NetworkBuildError
from localnoise.pipeline.schemas import LayerSpec

Params = Dict[str, np.ndarray]
Shape = Tuple[int, ...]


def glorot_uniform(rng: np.random.Generator, shape: Shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer(ABC):
    def __init__(self, spec: LayerSpec):
        self.spec = spec

    @abstractmethod
    def output_shape(self, input_shape: Shape) -> Shape:
        pass

    def init_params(self, input_shape: Shape, rng: np.random.Generator, dtype) -> Params:
        return {}

    def param_shapes(self, input_shape: Shape) -> Dict[str, Shape]:
        return {}

    @abstractmethod
    def forward(self, params: Params, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        pass

    @abstractmethod
    def backward(self, params: Params, cache: Any, dy: np.ndarray, need_params: bool = True) -> Tuple[np.ndarray, Params]:
        pass


class Conv2D(Layer):
    """Stride-1 convolution with symmetric zero padding, computed as im2col + matmul."""

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 3:
            raise NetworkBuildError(f"conv2d expects a (C, H, W) input, got {input_shape}", field="layers")
        c, h, w = input_shape
        k, p = self.spec.kernel, self.spec.padding
        ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
        if ho < 1 or wo < 1:
            raise NetworkBuildError(f"conv2d kernel {k} does not fit input {input_shape} with padding {p}", field="layers")
        return (self.spec.out_channels, ho, wo)

    def param_shapes(self, input_shape: Shape) -> Dict[str, Shape]:
        k, o = self.spec.kernel, self.spec.out_channels
        return {"weight": (o, input_shape[0], k, k), "bias": (o,)}

    def init_params(self, input_shape: Shape, rng: np.random.Generator, dtype) -> Params:
        k, o, c = self.spec.kernel, self.spec.out_channels, input_shape[0]
        weight = glorot_uniform(rng, (o, c, k, k), fan_in=c * k * k, fan_out=o * k * k, dtype=dtype)
        return {"weight": weight, "bias": np.zeros(o, dtype=dtype)}

    def forward(self, params: Params, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        p, k = self.spec.padding, self.spec.kernel
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        n, c, hp, wp = xp.shape
        ho, wo = hp - k + 1, wp - k + 1
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        weight = params["weight"]
        out = cols @ weight.reshape(weight.shape[0], -1).T + params["bias"]
        y = np.ascontiguousarray(out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2))
        return y, (cols, x.shape)

    def backward(self, params: Params, cache: Any, dy: np.ndarray, need_params: bool = True) -> Tuple[np.ndarray, Params]:
        cols, in_shape = cache
        n, c, h, w = in_shape
        k, p = self.spec.kernel, self.spec.padding
        _, o, ho, wo = dy.shape
        weight = params["weight"]
        dyr = dy.transpose(0, 2, 3, 1).reshape(-1, o)

        grads: Params = {}
        if need_params:
            grads = {"weight": (dyr.T @ cols).reshape(weight.shape), "bias": dyr.sum(axis=0)}

        dcols = (dyr @ weight.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros((n, c, ho + k - 1, wo + k - 1), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        return dx, grads


class ReLU(Layer):
    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape

    def forward(self, params: Params, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        mask = x > 0
        return np.where(mask, x, np.zeros((), dtype=x.dtype)), mask

    def backward(self, params: Params, cache: Any, dy: np.ndarray, need_params: bool = True) -> Tuple[np.ndarray, Params]:
        return np.where(cache, dy, np.zeros((), dtype=dy.dtype)), {}


class MaxPool2D(Layer):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped.

    Ties inside a window route the gradient to the first maximum in row-major order.
    """

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 3:
            raise NetworkBuildError(f"maxpool2d expects a (C, H, W) input, got {input_shape}", field="layers")
        c, h, w = input_shape
        k = self.spec.window
        if h < k or w < k:
            raise NetworkBuildError(f"maxpool2d window {k} larger than input {input_shape}", field="layers")
        return (c, h // k, w // k)

    def forward(self, params: Params, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        k = self.spec.window
        n, c, h, w = x.shape
        ho, wo = h // k, w // k
        blocks = (
            x[:, :, :ho * k, :wo * k]
            .reshape(n, c, ho, k, wo, k)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, ho, wo, k * k)
        )
        idx = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, params: Params, cache: Any, dy: np.ndarray, need_params: bool = True) -> Tuple[np.ndarray, Params]:
        idx, in_shape = cache
        k = self.spec.window
        n, c, ho, wo = dy.shape
        dblocks = np.zeros((n, c, ho, wo, k * k), dtype=dy.dtype)
        np.put_along_axis(dblocks, idx[..., None], dy[..., None], axis=-1)
        dx = np.zeros(in_shape, dtype=dy.dtype)
        dx[:, :, :ho * k, :wo * k] = dblocks.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        return dx, {}


class Flatten(Layer):
    def output_shape(self, input_shape: Shape) -> Shape:
        return (int(np.prod(input_shape)),)

    def forward(self, params: Params, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params: Params, cache: Any, dy: np.ndarray, need_params: bool = True) -> Tuple[np.ndarray, Params]:
        return dy.reshape(cache), {}


class Dense(Layer):
    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 1:
            raise NetworkBuildError(f"dense expects a flat input, got {input_shape}; add a flatten layer", field="layers")
        return (self.spec.out_features,)

    def param_shapes(self, input_shape: Shape) -> Dict[str, Shape]:
        return {"weight": (input_shape[0], self.spec.out_features), "bias": (self.spec.out_features,)}

    def init_params(self, input_shape: Shape, rng: np.random.Generator, dtype) -> Params:
        fan_in, fan_out = input_shape[0], self.spec.out_features
        weight = glorot_uniform(rng, (fan_in, fan_out), fan_in=fan_in, fan_out=fan_out, dtype=dtype)
        return {"weight": weight, "bias": np.zeros(fan_out, dtype=dtype)}

    def forward(self, params: Params, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        return x @ params["weight"] + params["bias"], x

    def backward(self, params: Params, cache: Any, dy: np.ndarray, need_params: bool = True) -> Tuple[np.ndarray, Params]:
        grads: Params = {}
        if need_params:
            grads = {"weight": cache.T @ dy, "bias": dy.sum(axis=0)}
        return dy @ params["weight"].T, grads


LAYER_TYPES = {
    "conv2d": Conv2D,
    "relu": ReLU,
    "maxpool2d": MaxPool2D,
    "flatten": Flatten,
    "dense": Dense,
}


def make_layer(spec: LayerSpec) -> Layer:
    return LAYER_TYPES[spec.kind](spec)
