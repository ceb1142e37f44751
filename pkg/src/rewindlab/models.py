"""Model zoo and parameter accounting.

ResNet-20/56/110 follow the original CIFAR design (post-activation basic
blocks, widths 16/32/64). When a block changes width the shortcut is a
strided 1x1 convolution without batch norm; identity otherwise. That is the
only variant whose counts reproduce the published 272282/270896 (ResNet-20),
855578/851504 (ResNet-56) and 1730522/1722416 (ResNet-110).

WRN-16-8 uses pre-activation blocks with widths 16/128/256/512, a 1x1
projection on every width change, and a final BN-ReLU before pooling
(10961370 trainable / 10954160 kernel parameters).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np

from . import engine as E
from .engine import Tensor

ZOO = ("resnet20", "resnet56", "resnet110", "wrn16-8", "mlp-small", "cnn-small")

DEFAULT_BN_DECAY = {"resnet": 0.997, "wrn": 0.9, "cnn": 0.99, "mlp": 0.99}


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    prunable: bool
    init: str  # "he_uniform", "zeros" or "ones"
    fan_in: int = 0

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


# layer graph records
@dataclass(frozen=True)
class Conv:
    name: str
    stride: int = 1


@dataclass(frozen=True)
class BatchNorm:
    name: str


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class BasicBlock:
    """conv-BN-ReLU-conv-BN, add shortcut, ReLU."""
    prefix: str
    stride: int
    projection: bool


@dataclass(frozen=True)
class PreactBlock:
    """BN-ReLU-conv-BN-ReLU-conv, add shortcut (taken after the first BN-ReLU if projecting)."""
    prefix: str
    stride: int
    projection: bool


@dataclass(frozen=True)
class GlobalPool:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    name: str


Layer = Union[Conv, BatchNorm, ReLU, BasicBlock, PreactBlock, GlobalPool, Flatten, Dense]


@dataclass(frozen=True)
class ModelSpec:
    name: str
    family: str
    num_classes: int
    input_shape: tuple[int, int, int]
    params: tuple[ParamSpec, ...]
    bn_layers: tuple[str, ...]
    layers: tuple[Layer, ...]
    initializer: str = "he_uniform(fan_in)"

    def param(self, name: str) -> ParamSpec:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    @property
    def prunable_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.params if p.prunable)

    @property
    def default_bn_decay(self) -> float:
        return DEFAULT_BN_DECAY[self.family]


@dataclass(frozen=True)
class ParamReport:
    trainable_count: int
    kernel_count: int
    layers: tuple[tuple[str, int, bool], ...] = field(default=(), repr=False)


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    bn_state: dict[str, np.ndarray]

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()},
                     {k: v.copy() for k, v in self.bn_state.items()})

    def state(self) -> dict[str, np.ndarray]:
        """Trainable weights and BN moving statistics in one flat dict."""
        return {**self.params, **self.bn_state}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for k in self.params:
            self.params[k] = np.array(state[k], dtype=self.params[k].dtype)
        for k in self.bn_state:
            if k in state:
                self.bn_state[k] = np.array(state[k], dtype=self.bn_state[k].dtype)


class _Builder:
    def __init__(self):
        self.params: list[ParamSpec] = []
        self.bn: list[str] = []

    def conv(self, name: str, cin: int, cout: int, k: int) -> None:
        self.params.append(ParamSpec(name, (cout, k, k, cin), True, "he_uniform", k * k * cin))

    def batchnorm(self, name: str, c: int) -> None:
        self.params.append(ParamSpec(name + ".gamma", (c,), False, "ones"))
        self.params.append(ParamSpec(name + ".beta", (c,), False, "zeros"))
        self.bn.append(name)

    def dense(self, name: str, fin: int, fout: int) -> None:
        self.params.append(ParamSpec(name, (fout, fin), True, "he_uniform", fin))
        self.params.append(ParamSpec(name + ".bias", (fout,), False, "zeros"))


def _resnet(depth: int, classes: int, input_shape) -> ModelSpec:
    if (depth - 2) % 6:
        raise ValueError(f"ResNet depth must be 6n+2, got {depth}")
    n = (depth - 2) // 6
    b = _Builder()
    layers: list[Layer] = [Conv("conv0"), BatchNorm("bn0"), ReLU()]
    b.conv("conv0", input_shape[2], 16, 3)
    b.batchnorm("bn0", 16)
    cin = 16
    for stage, width in enumerate((16, 32, 64)):
        for i in range(n):
            stride = 2 if stage > 0 and i == 0 else 1
            prefix = f"stage{stage + 1}.block{i + 1}"
            projection = stride != 1 or cin != width
            b.conv(prefix + ".conv1", cin, width, 3)
            b.batchnorm(prefix + ".bn1", width)
            b.conv(prefix + ".conv2", width, width, 3)
            b.batchnorm(prefix + ".bn2", width)
            if projection:
                b.conv(prefix + ".shortcut", cin, width, 1)
            layers.append(BasicBlock(prefix, stride, projection))
            cin = width
    b.dense("fc", 64, classes)
    layers += [GlobalPool(), Dense("fc")]
    return ModelSpec(f"resnet{depth}", "resnet", classes, tuple(input_shape), tuple(b.params),
                     tuple(b.bn), tuple(layers))


def _wrn(depth: int, widen: int, classes: int, input_shape) -> ModelSpec:
    if (depth - 4) % 6:
        raise ValueError(f"WRN depth must be 6n+4, got {depth}")
    n = (depth - 4) // 6
    b = _Builder()
    layers: list[Layer] = [Conv("conv0")]
    b.conv("conv0", input_shape[2], 16, 3)
    cin = 16
    for stage, base in enumerate((16, 32, 64)):
        width = base * widen
        for i in range(n):
            stride = 2 if stage > 0 and i == 0 else 1
            prefix = f"stage{stage + 1}.block{i + 1}"
            projection = stride != 1 or cin != width
            b.batchnorm(prefix + ".bn1", cin)
            b.conv(prefix + ".conv1", cin, width, 3)
            b.batchnorm(prefix + ".bn2", width)
            b.conv(prefix + ".conv2", width, width, 3)
            if projection:
                b.conv(prefix + ".shortcut", cin, width, 1)
            layers.append(PreactBlock(prefix, stride, projection))
            cin = width
    b.batchnorm("bn_final", cin)
    b.dense("fc", cin, classes)
    layers += [BatchNorm("bn_final"), ReLU(), GlobalPool(), Dense("fc")]
    return ModelSpec(f"wrn{depth}-{widen}", "wrn", classes, tuple(input_shape), tuple(b.params),
                     tuple(b.bn), tuple(layers))


def _cnn_small(classes: int, input_shape) -> ModelSpec:
    # 432 + 4608 + 9216 + 18432 + 64*classes kernel weights (33328 for 10 classes);
    # the strided stem keeps 32x32 inputs affordable on one CPU core
    b = _Builder()
    layers: list[Layer] = []
    cin = input_shape[2]
    for i, (width, stride) in enumerate(((16, 2), (32, 2), (32, 1), (64, 2))):
        b.conv(f"conv{i}", cin, width, 3)
        b.batchnorm(f"bn{i}", width)
        layers += [Conv(f"conv{i}", stride), BatchNorm(f"bn{i}"), ReLU()]
        cin = width
    b.dense("fc", cin, classes)
    layers += [GlobalPool(), Dense("fc")]
    return ModelSpec("cnn-small", "cnn", classes, tuple(input_shape), tuple(b.params),
                     tuple(b.bn), tuple(layers))


def mlp_spec(input_dim: int, hidden: tuple[int, ...], classes: int, name: str = "mlp",
             input_shape=None) -> ModelSpec:
    b = _Builder()
    layers: list[Layer] = [Flatten()]
    fin = input_dim
    for i, width in enumerate(hidden):
        b.dense(f"fc{i}", fin, width)
        layers += [Dense(f"fc{i}"), ReLU()]
        fin = width
    b.dense("out", fin, classes)
    layers.append(Dense("out"))
    shape = tuple(input_shape) if input_shape is not None else (1, 1, input_dim)
    return ModelSpec(name, "mlp", classes, shape, tuple(b.params), tuple(b.bn), tuple(layers))


def model_spec(name: str, num_classes: int = 10, input_shape=(32, 32, 3)) -> ModelSpec:
    """Architecture description without allocating weights."""
    input_shape = tuple(int(v) for v in input_shape)
    if name in ("resnet20", "resnet56", "resnet110"):
        return _resnet(int(name[6:]), num_classes, input_shape)
    if name == "wrn16-8":
        return _wrn(16, 8, num_classes, input_shape)
    if name == "cnn-small":
        return _cnn_small(num_classes, input_shape)
    if name == "mlp-small":
        h, w, c = input_shape
        return mlp_spec(h * w * c, (100,), num_classes, "mlp-small", input_shape)
    raise ValueError(f"unknown model {name!r}; zoo: {', '.join(ZOO)}")


def init_weights(spec: ModelSpec, seed: int, dtype=np.float32) -> Model:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for p in spec.params:
        if p.init == "he_uniform":
            params[p.name] = E.he_uniform(rng, p.shape, p.fan_in, dtype)
        elif p.init == "ones":
            params[p.name] = np.ones(p.shape, dtype=dtype)
        else:
            params[p.name] = np.zeros(p.shape, dtype=dtype)
    bn_state: dict[str, np.ndarray] = {}
    for name in spec.bn_layers:
        c = spec.param(name + ".gamma").shape[0]
        bn_state[name + ".moving_mean"] = np.zeros(c, dtype=dtype)
        bn_state[name + ".moving_var"] = np.ones(c, dtype=dtype)
    return Model(spec, params, bn_state)


def build(name: str, num_classes: int = 10, seed: int = 0, input_shape=(32, 32, 3),
          dtype=np.float32) -> Model:
    """Build a zoo model with He-uniform (fan-in) kernels, BN gamma 1 / beta 0."""
    if name.startswith(("resnet", "wrn")) and num_classes not in (10, 100):
        raise ValueError(f"{name} is defined for 10 or 100 classes, got {num_classes}")
    return init_weights(model_spec(name, num_classes, input_shape), seed, dtype)


def count_params(model: Model | ModelSpec) -> ParamReport:
    spec = model.spec if isinstance(model, Model) else model
    layers = tuple((p.name, p.size, p.prunable) for p in spec.params)
    return ParamReport(trainable_count=sum(n for _, n, _ in layers),
                       kernel_count=sum(n for _, n, k in layers if k),
                       layers=layers)


def forward(spec: ModelSpec, params: Mapping[str, Tensor], bn_state: Mapping[str, np.ndarray],
            x: Tensor, training: bool, bn_decay: float | None = None) -> Tensor:
    """Logits for a batch of NHWC images."""
    decay = spec.default_bn_decay if bn_decay is None else bn_decay
    if tuple(x.shape[1:]) != spec.input_shape:
        raise E.ShapeError(f"{spec.name}: expected input (n, {', '.join(map(str, spec.input_shape))}), "
                           f"got {x.shape}")

    def bn(h, name):
        return E.batchnorm(h, params[name + ".gamma"], params[name + ".beta"],
                           bn_state[name + ".moving_mean"], bn_state[name + ".moving_var"],
                           decay, training, name=name)

    def conv(h, name, stride=1):
        return E.conv2d(h, params[name], stride, "same", name=name)

    h = x
    for layer in spec.layers:
        if isinstance(layer, Conv):
            h = conv(h, layer.name, layer.stride)
        elif isinstance(layer, BatchNorm):
            h = bn(h, layer.name)
        elif isinstance(layer, ReLU):
            h = E.relu(h)
        elif isinstance(layer, BasicBlock):
            p = layer.prefix
            out = E.relu(bn(conv(h, p + ".conv1", layer.stride), p + ".bn1"))
            out = bn(conv(out, p + ".conv2"), p + ".bn2")
            short = conv(h, p + ".shortcut", layer.stride) if layer.projection else h
            h = E.relu(out + short)
        elif isinstance(layer, PreactBlock):
            p = layer.prefix
            act = E.relu(bn(h, p + ".bn1"))
            out = conv(act, p + ".conv1", layer.stride)
            out = conv(E.relu(bn(out, p + ".bn2")), p + ".conv2")
            short = conv(act, p + ".shortcut", layer.stride) if layer.projection else h
            h = out + short
        elif isinstance(layer, GlobalPool):
            h = E.global_avg_pool(h)
        elif isinstance(layer, Flatten):
            h = E.flatten(h)
        elif isinstance(layer, Dense):
            bias = params.get(layer.name + ".bias")
            h = E.dense(h, params[layer.name], bias, name=layer.name)
        else:  # pragma: no cover
            raise TypeError(f"unknown layer {layer!r}")
    return h


def logits(model: Model, x: np.ndarray, training: bool = False, bn_decay: float | None = None) -> np.ndarray:
    with E.no_grad():
        params = {k: Tensor(v) for k, v in model.params.items()}
        return forward(model.spec, params, model.bn_state, Tensor(x), training, bn_decay).data
