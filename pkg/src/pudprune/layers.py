"""Layer primitives, including the scaling-factor normalization layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, SizeError, SpecError
from .tensor import Tensor

KINDS = ("conv", "dense", "scalednorm", "relu", "maxpool", "avgpool", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer.

    ``in_channels`` / ``in_features`` are optional assertions checked
    against the inferred input shape when the network is built.
    """

    kind: str
    channels: int | None = None
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    units: int | None = None
    window: int = 2
    in_channels: int | None = None
    in_features: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")


def conv(channels, kernel=3, stride=1, padding=1, in_channels=None) -> LayerSpec:
    return LayerSpec("conv", channels=channels, kernel=kernel, stride=stride, padding=padding,
                     in_channels=in_channels)


def dense(units, in_features=None) -> LayerSpec:
    return LayerSpec("dense", units=units, in_features=in_features)


def scalednorm(channels=None) -> LayerSpec:
    return LayerSpec("scalednorm", channels=channels)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool(window=2, stride=None) -> LayerSpec:
    return LayerSpec("maxpool", window=window, stride=window if stride is None else stride)


def avgpool(window=2, stride=None) -> LayerSpec:
    return LayerSpec("avgpool", window=window, stride=window if stride is None else stride)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


class Layer:
    kind = ""
    param_names: tuple[str, ...] = ()

    def params(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.param_names}

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError


class Conv2d(Layer):
    kind = "conv"
    param_names = ("weight", "bias")

    def __init__(self, weight: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0):
        self.weight = Tensor(weight, True)
        self.bias = Tensor(bias, True)
        self.stride = stride
        self.padding = padding

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        k = self.kernel
        return (self.out_channels, (h + 2 * self.padding - k) // self.stride + 1,
                (w + 2 * self.padding - k) // self.stride + 1)


class Dense(Layer):
    kind = "dense"
    param_names = ("weight", "bias")

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = Tensor(weight, True)  # [in, out]
        self.bias = Tensor(bias, True)

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def units(self) -> int:
        return self.weight.shape[1]

    def forward(self, x):
        return dense_forward(self, x)

    def out_shape(self, in_shape):
        return (self.units,)


class ScaledNorm(Layer):
    """Per-channel normalization whose scale vector is the pruning signal."""

    kind = "scalednorm"
    param_names = ("gamma", "beta")

    def __init__(self, channels: int, gamma: float = 0.5, momentum: float = 0.1,
                 eps: float = 1e-5):
        if not 0.0 < momentum < 1.0:
            raise ConfigError("momentum must lie in (0, 1)")
        if eps <= 0:
            raise ConfigError("eps must be positive")
        self.gamma = Tensor(np.full(channels, gamma), True)
        self.beta = Tensor(np.zeros(channels), True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.mode = "train"

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def forward(self, x):
        return scalednorm_forward(self, x)

    def out_shape(self, in_shape):
        return in_shape


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return T.relu(x)

    def out_shape(self, in_shape):
        return in_shape


class Pool(Layer):
    def __init__(self, kind: str, window: int, stride: int):
        self.kind = kind
        self.window = window
        self.stride = stride

    def forward(self, x):
        return pool_forward("max" if self.kind == "maxpool" else "avg", x, self.window, self.stride)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (c, (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        return T.reshape(x, (x.shape[0], -1))

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


def dense_forward(layer: Dense, x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise SizeError(f"dense layer expects width {layer.in_features}, got {x.shape}")
    return T.bias_add(T.matmul(x, layer.weight), layer.bias)


def scalednorm_forward(layer: ScaledNorm, x: Tensor) -> Tensor:
    """Train mode normalizes with batch statistics and updates the running
    estimates; eval mode is a fixed per-channel affine map."""
    if x.ndim < 2 or x.shape[1] != layer.channels:
        raise SizeError(f"scalednorm has {layer.channels} channels, input {x.shape}")
    if layer.mode == "eval":
        out, _, _ = T.scaled_norm(x, layer.gamma, layer.beta, layer.eps,
                                  running=(layer.running_mean, layer.running_var))
        return out
    out, mean, var = T.scaled_norm(x, layer.gamma, layer.beta, layer.eps)
    m = x.data.size // layer.channels
    unbiased = var * m / (m - 1) if m > 1 else var
    mom = layer.momentum
    layer.running_mean = (1 - mom) * layer.running_mean + mom * mean
    layer.running_var = (1 - mom) * layer.running_var + mom * unbiased
    return out


def pool_forward(kind: str, x: Tensor, window: int, stride: int) -> Tensor:
    if kind == "max":
        return T.max_pool2d(x, window, stride)
    if kind == "avg":
        return T.avg_pool2d(x, window, stride)
    raise SpecError(f"unknown pool kind {kind!r}")


def softmax_temperature(logits: Tensor, tau: float) -> Tensor:
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    return T.softmax(logits, tau)


def log_softmax_temperature(logits: Tensor, tau: float) -> Tensor:
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    return T.log_softmax(logits, tau)
