"""Single-input CNN forward pass with per-layer timestamps and max-pool
update counting.

Layers are frozen dataclasses; a :class:`ModelSpec` is an ordered tuple of
them plus the input shape. Forward evaluation is float32 throughout.
"""

from __future__ import annotations

import enum
import json
import time
from dataclasses import dataclass, field, replace
from typing import Any, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .errors import FormatError, ShapeError, ShapeMismatch
from .tensor import Tensor, pad_array

FORMAT_VERSION = 1


class PoolVariant(str, enum.Enum):
    NAIVE = "naive"
    CONSTANT_TIME = "ct"

    @classmethod
    def parse(cls, value: "PoolVariant | str") -> "PoolVariant":
        if isinstance(value, PoolVariant):
            return value
        aliases = {
            "naive": cls.NAIVE,
            "naivebranchy": cls.NAIVE,
            "ct": cls.CONSTANT_TIME,
            "constanttime": cls.CONSTANT_TIME,
            "constant_time": cls.CONSTANT_TIME,
        }
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown pool variant {value!r}") from None


def _pair(v: int | Sequence[int]) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


# --------------------------------------------------------------------- layers


@dataclass(frozen=True)
class Conv2d:
    weight: Tensor  # out_ch x in_ch x kh x kw
    bias: Tensor  # out_ch
    stride: int = 1
    padding: int = 0
    kind = "Conv2d"

    def __post_init__(self):
        if self.weight.rank != 4:
            raise ShapeMismatch("conv weight must be rank 4")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeMismatch("conv bias length must equal out_channels")
        if self.stride < 1 or self.padding < 0:
            raise ShapeMismatch("stride must be >= 1 and padding >= 0")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


@dataclass(frozen=True)
class ReLU:
    kind = "ReLU"


@dataclass(frozen=True)
class MaxPool:
    kernel: tuple[int, int]
    stride: int
    padding: int = 0
    variant: PoolVariant = PoolVariant.NAIVE
    kind = "MaxPool"

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "variant", PoolVariant.parse(self.variant))
        if min(self.kernel) < 1 or self.stride < 1 or self.padding < 0:
            raise ShapeMismatch("pool kernel and stride must be >= 1")


@dataclass(frozen=True)
class AvgPool:
    kernel: tuple[int, int]
    stride: int
    padding: int = 0
    kind = "AvgPool"

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        if min(self.kernel) < 1 or self.stride < 1 or self.padding < 0:
            raise ShapeMismatch("pool kernel and stride must be >= 1")


@dataclass(frozen=True)
class Flatten:
    kind = "Flatten"


@dataclass(frozen=True)
class Dense:
    weight: Tensor  # out x in
    bias: Tensor  # out
    kind = "Dense"

    def __post_init__(self):
        if self.weight.rank != 2:
            raise ShapeMismatch("dense weight must be rank 2")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeMismatch("dense bias length must equal out features")


@dataclass(frozen=True)
class Softmax:
    kind = "Softmax"


LayerSpec = Union[Conv2d, ReLU, MaxPool, AvgPool, Flatten, Dense, Softmax]
PARAM_LAYERS = (Conv2d, Dense)


def _pool_out(shape, kernel, stride, padding, what) -> tuple[int, ...]:
    if len(shape) != 3:
        raise ShapeError(f"{what} needs a C x H x W input, got {shape}")
    c, h, w = shape
    kh, kw = kernel
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"{what} window {kernel} does not fit padded input {hp}x{wp}")
    return c, (hp - kh) // stride + 1, (wp - kw) // stride + 1


def layer_output_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeMismatch(f"conv expects {layer.in_channels} x H x W, got {shape}")
        _, oh, ow = _pool_out(shape, layer.kernel, layer.stride, layer.padding, "Conv2d")
        return layer.out_channels, oh, ow
    if isinstance(layer, (MaxPool, AvgPool)):
        return _pool_out(shape, layer.kernel, layer.stride, layer.padding, layer.kind)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Dense):
        if shape != (layer.weight.shape[1],):
            raise ShapeMismatch(f"dense expects ({layer.weight.shape[1]},), got {shape}")
        return (layer.weight.shape[0],)
    return tuple(shape)


def infer_shapes(layers: Sequence[LayerSpec], input_shape: Sequence[int]) -> list[tuple[int, ...]]:
    """Output shape after every layer."""
    shape = tuple(input_shape)
    shapes = []
    for layer in layers:
        shape = layer_output_shape(layer, shape)
        shapes.append(shape)
    return shapes


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple[int, ...]
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.class_count < 1:
            raise ShapeMismatch("class_count must be positive")
        shapes = infer_shapes(self.layers, self.input_shape)
        final = shapes[-1] if shapes else self.input_shape
        if int(np.prod(final)) != self.class_count or len(final) != 1:
            raise ShapeMismatch(f"final output {final} does not match class_count {self.class_count}")

    @property
    def layer_names(self) -> list[str]:
        return [f"{i + 1}:{layer.kind}" for i, layer in enumerate(self.layers)]

    def params(self) -> list[np.ndarray]:
        """Weight and bias arrays of every Conv2d/Dense layer, in order."""
        out = []
        for layer in self.layers:
            if isinstance(layer, PARAM_LAYERS):
                out.extend([layer.weight.array, layer.bias.array])
        return out

    def with_params(self, arrays: Sequence[np.ndarray]) -> "ModelSpec":
        it = iter(arrays)
        layers = []
        for layer in self.layers:
            if isinstance(layer, PARAM_LAYERS):
                w, b = next(it), next(it)
                layer = replace(layer, weight=Tensor.from_array(w), bias=Tensor.from_array(b))
            layers.append(layer)
        if next(it, None) is not None:
            raise ShapeMismatch("too many parameter arrays")
        return replace(self, layers=tuple(layers))

    def with_pool_variant(self, variant: PoolVariant | str) -> "ModelSpec":
        v = PoolVariant.parse(variant)
        layers = [replace(l, variant=v) if isinstance(l, MaxPool) else l for l in self.layers]
        return replace(self, layers=tuple(layers))

    def with_avg_pools(self) -> "ModelSpec":
        layers = [
            AvgPool(l.kernel, l.stride, l.padding) if isinstance(l, MaxPool) else l
            for l in self.layers
        ]
        return replace(self, layers=tuple(layers))


# ------------------------------------------------------------ array kernels


def conv2d_array(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int) -> np.ndarray:
    o, c, kh, kw = w.shape
    xp = pad_array(x, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    _, oh, ow = _pool_out(x.shape, (kh, kw), stride, padding, "Conv2d")
    win = win[:, :oh, :ow]
    # (C, oh, ow, kh, kw) -> (oh*ow, C*kh*kw)
    cols = win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, c * kh * kw)
    out = cols @ w.reshape(o, -1).T + b
    return np.ascontiguousarray(out.T.reshape(o, oh, ow))


def maxpool_array(x: np.ndarray, kernel, stride: int, padding: int, variant: PoolVariant):
    kh, kw = _pair(kernel)
    _pool_out(x.shape, (kh, kw), stride, padding, "MaxPool")
    xp = np.ascontiguousarray(pad_array(x, padding), dtype=np.float32)
    scan = _kernels.maxpool_naive if variant is PoolVariant.NAIVE else _kernels.maxpool_ct
    return scan(xp, kh, kw, stride)


def avgpool_array(x: np.ndarray, kernel, stride: int, padding: int) -> np.ndarray:
    kh, kw = _pair(kernel)
    _, oh, ow = _pool_out(x.shape, (kh, kw), stride, padding, "AvgPool")
    xp = pad_array(x, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    return win.sum(axis=(-2, -1), dtype=np.float32) / np.float32(kh * kw)


def softmax_array(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x)
    e = np.exp(z)
    return e / e.sum()


# --------------------------------------------------------- public operations


def conv2d_forward(x: Tensor, layer: Conv2d) -> Tensor:
    if x.rank != 3 or x.shape[0] != layer.in_channels:
        raise ShapeMismatch(f"conv expects {layer.in_channels} x H x W, got {x.shape}")
    layer_output_shape(layer, x.shape)
    out = conv2d_array(x.array, layer.weight.array, layer.bias.array, layer.stride, layer.padding)
    return Tensor.from_array(out)


def relu_forward(x: Tensor) -> Tensor:
    return Tensor.from_array(np.maximum(x.array, np.float32(0)))


def maxpool_forward(
    x: Tensor,
    kernel: int | tuple[int, int],
    stride: int,
    padding: int = 0,
    variant: PoolVariant | str = PoolVariant.NAIVE,
) -> tuple[Tensor, np.ndarray, int]:
    """Max-pool with argmax indices (flat, padded channel plane) and the
    number of executed max-update assignments."""
    if x.rank != 3:
        raise ShapeMismatch(f"maxpool expects C x H x W, got {x.shape}")
    if stride < 1:
        raise ShapeMismatch("stride must be >= 1")
    out, idx, count = maxpool_array(x.array, kernel, stride, padding, PoolVariant.parse(variant))
    return Tensor.from_array(out), idx, count


def avgpool_forward(x: Tensor, kernel: int | tuple[int, int], stride: int, padding: int = 0) -> Tensor:
    if x.rank != 3:
        raise ShapeMismatch(f"avgpool expects C x H x W, got {x.shape}")
    return Tensor.from_array(avgpool_array(x.array, kernel, stride, padding))


def dense_forward(x: Tensor, layer: Dense) -> Tensor:
    if x.size != layer.weight.shape[1]:
        raise ShapeMismatch(f"dense expects {layer.weight.shape[1]} inputs, got {x.size}")
    out = layer.weight.array @ x.data + layer.bias.array
    return Tensor.from_array(out)


def softmax(x: Tensor) -> Tensor:
    return Tensor(x.shape, softmax_array(x.data.astype(np.float64)))


# ------------------------------------------------------------- model forward


@dataclass
class InstrumentedOutput:
    logits: np.ndarray
    predicted_label: int
    layer_times_ns: list[int] = field(default_factory=list)
    total_time_ns: int = 0
    branch_not_taken: list[int] = field(default_factory=list)


def _apply(layer: LayerSpec, a: np.ndarray, counts: list[int]) -> np.ndarray:
    if isinstance(layer, Conv2d):
        return conv2d_array(a, layer.weight.array, layer.bias.array, layer.stride, layer.padding)
    if isinstance(layer, ReLU):
        return np.maximum(a, np.float32(0))
    if isinstance(layer, MaxPool):
        out, _, n = maxpool_array(a, layer.kernel, layer.stride, layer.padding, layer.variant)
        counts.append(n)
        return out
    if isinstance(layer, AvgPool):
        return avgpool_array(a, layer.kernel, layer.stride, layer.padding)
    if isinstance(layer, Flatten):
        return a.reshape(-1)
    if isinstance(layer, Dense):
        return layer.weight.array @ a.reshape(-1) + layer.bias.array
    if isinstance(layer, Softmax):
        return softmax_array(a)
    raise TypeError(f"unknown layer {layer!r}")


def model_forward(model: ModelSpec, x: Tensor | np.ndarray, instrument: bool = False) -> InstrumentedOutput:
    """Run every layer in order.

    With ``instrument`` a ``perf_counter_ns`` timestamp is taken before the
    first layer and after each layer; ``layer_times_ns`` are the adjacent
    differences.
    """
    a = x.array if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    if tuple(a.shape) != model.input_shape:
        raise ShapeMismatch(f"input shape {tuple(a.shape)} != model input {model.input_shape}")
    counts: list[int] = []
    if instrument:
        clock = time.perf_counter_ns
        stamps = [clock()]
        for layer in model.layers:
            a = _apply(layer, a, counts)
            stamps.append(clock())
        layer_times = [t1 - t0 for t0, t1 in zip(stamps, stamps[1:])]
        total = stamps[-1] - stamps[0]
    else:
        for layer in model.layers:
            a = _apply(layer, a, counts)
        layer_times, total = [], 0
    logits = np.asarray(a, dtype=np.float32).reshape(-1)
    return InstrumentedOutput(
        logits=logits,
        predicted_label=int(np.argmax(logits)),
        layer_times_ns=layer_times,
        total_time_ns=total,
        branch_not_taken=counts,
    )


def update_counts(model: ModelSpec, x: Tensor | np.ndarray) -> list[int]:
    """Per-MaxPool update counts for one input, without timing."""
    return model_forward(model, x, instrument=False).branch_not_taken


# --------------------------------------------------------------- custom CNN


CUSTOM_CNN_CONVS = ((16, 32), (32, 32), (64, 128))


def _he_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def build_custom_cnn(
    input_shape: Sequence[int] = (3, 32, 32),
    class_count: int = 10,
    seed: int = 0,
    variant: PoolVariant | str = PoolVariant.NAIVE,
) -> ModelSpec:
    """Conv-16, Conv-32, MaxPool, Conv-32, Conv-32, MaxPool, Conv-64,
    Conv-128, Dense-128, Dense-64, Dense-classes, Softmax.

    Convolutions are 3x3, stride 1, padding 1; pools are 3x3 stride 2. Every
    Conv and hidden Dense is followed by a ReLU layer.
    """
    rng = np.random.default_rng(seed)
    variant = PoolVariant.parse(variant)
    shape = tuple(int(d) for d in input_shape)
    if len(shape) != 3:
        raise ShapeError("input_shape must be C x H x W")
    layers: list[LayerSpec] = []

    def conv(out_ch: int):
        nonlocal shape
        fan_in = shape[0] * 9
        layer = Conv2d(
            Tensor.from_array(_he_init(rng, (out_ch, shape[0], 3, 3), fan_in)),
            Tensor.from_array(np.zeros(out_ch, dtype=np.float32)),
            stride=1,
            padding=1,
        )
        shape = layer_output_shape(layer, shape)
        layers.extend([layer, ReLU()])

    def pool():
        nonlocal shape
        layer = MaxPool((3, 3), 2, 0, variant)
        shape = layer_output_shape(layer, shape)
        layers.append(layer)

    for group, (a, b) in enumerate(CUSTOM_CNN_CONVS):
        conv(a)
        conv(b)
        if group < 2:
            pool()
    layers.append(Flatten())
    width = int(np.prod(shape))
    for i, units in enumerate((128, 64, class_count)):
        layers.append(
            Dense(
                Tensor.from_array(_he_init(rng, (units, width), width)),
                Tensor.from_array(np.zeros(units, dtype=np.float32)),
            )
        )
        width = units
        if i < 2:
            layers.append(ReLU())
    layers.append(Softmax())
    return ModelSpec(tuple(layers), tuple(input_shape), class_count)


# ------------------------------------------------------------ serialization


def _layer_to_dict(layer: LayerSpec) -> dict[str, Any]:
    d: dict[str, Any] = {"kind": layer.kind}
    if isinstance(layer, Conv2d):
        d.update(stride=layer.stride, padding=layer.padding,
                 weight=layer.weight.to_dict(), bias=layer.bias.to_dict())
    elif isinstance(layer, Dense):
        d.update(weight=layer.weight.to_dict(), bias=layer.bias.to_dict())
    elif isinstance(layer, MaxPool):
        d.update(kernel=list(layer.kernel), stride=layer.stride,
                 padding=layer.padding, variant=layer.variant.value)
    elif isinstance(layer, AvgPool):
        d.update(kernel=list(layer.kernel), stride=layer.stride, padding=layer.padding)
    return d


def _layer_from_dict(d: dict[str, Any]) -> LayerSpec:
    kind = d.get("kind")
    if kind == "Conv2d":
        return Conv2d(Tensor.from_dict(d["weight"]), Tensor.from_dict(d["bias"]),
                      int(d["stride"]), int(d["padding"]))
    if kind == "Dense":
        return Dense(Tensor.from_dict(d["weight"]), Tensor.from_dict(d["bias"]))
    if kind == "MaxPool":
        return MaxPool(tuple(d["kernel"]), int(d["stride"]), int(d["padding"]), d["variant"])
    if kind == "AvgPool":
        return AvgPool(tuple(d["kernel"]), int(d["stride"]), int(d["padding"]))
    simple = {"ReLU": ReLU, "Flatten": Flatten, "Softmax": Softmax}
    if kind in simple:
        return simple[kind]()
    raise FormatError(f"unknown layer kind {kind!r}")


def model_to_dict(model: ModelSpec) -> dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "layers": [_layer_to_dict(l) for l in model.layers],
    }


def model_from_dict(obj: dict[str, Any]) -> ModelSpec:
    if obj.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported model format_version {obj.get('format_version')!r}")
    try:
        layers = tuple(_layer_from_dict(d) for d in obj["layers"])
        return ModelSpec(layers, tuple(obj["input_shape"]), int(obj["class_count"]))
    except KeyError as exc:
        raise FormatError(f"missing field {exc}") from exc


def save_model(model: ModelSpec, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path) -> ModelSpec:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
