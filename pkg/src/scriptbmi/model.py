"""Declarative CNN configurations, the ablation presets and the network stack."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from .exceptions import ConfigError, ShapeError
from .layers import Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2D, ReLU
from .tensor import RngStream

# named input sizes; 144 is the size whose same-padding shape chain gives a 82944-wide flatten
INPUT_SIZES = {"default": (224, 224), "compact": (144, 144)}


@dataclass(frozen=True)
class ModelConfig:
    conv_kernels: tuple[int, ...]
    conv_dropout_pct: tuple[int, ...]
    hidden_units: tuple[int, ...]
    hidden_dropout_pct: tuple[int, ...]
    num_classes: int = 48
    input_shape: tuple[int, int, int] = (3, 224, 224)
    name: str = ""
    tag: str = ""

    def __post_init__(self):
        for attr in ("conv_kernels", "conv_dropout_pct", "hidden_units", "hidden_dropout_pct", "input_shape"):
            object.__setattr__(self, attr, tuple(int(v) for v in getattr(self, attr)))
        self.validate()

    def validate(self):
        if not self.conv_kernels:
            raise ConfigError("at least one conv layer is required")
        if len(self.conv_kernels) != len(self.conv_dropout_pct):
            raise ConfigError("conv_kernels and conv_dropout_pct differ in length")
        if len(self.hidden_units) != len(self.hidden_dropout_pct):
            raise ConfigError("hidden_units and hidden_dropout_pct differ in length")
        if any(k < 1 for k in self.conv_kernels + self.hidden_units):
            raise ConfigError("kernel and unit counts must be >= 1")
        if any(not 0 <= p < 100 for p in self.conv_dropout_pct + self.hidden_dropout_pct):
            raise ConfigError("dropout percentages must lie in [0, 100)")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (C, H, W) with positive extents, got {self.input_shape}")

    def with_input(self, channels=None, size=None) -> "ModelConfig":
        c, h, w = self.input_shape
        if size is not None:
            h, w = (size, size) if isinstance(size, int) else size
        return replace(self, input_shape=(channels or c, h, w))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


def ablation_presets(num_classes=48, input_shape=(3, 224, 224)) -> list[ModelConfig]:
    """The eight ablation rows in table order; row 4 is ``best``, row 8 ``base``."""
    rows = [
        ((32, 64, 128, 256, 512), (0, 0, 0, 0, 50), (2048, 1024, 512, 256), (30, 40, 50, 40), ""),
        ((64, 128, 256, 512), (0, 0, 0, 0), (2048,), (50,), ""),
        ((32, 64), (20, 30), (256, 128), (40, 50), ""),
        ((64, 128, 256), (0, 0, 0), (512, 256, 128), (50, 50, 50), "best"),
        ((64, 128, 256), (0, 0, 0), (2048,), (50,), ""),
        ((64, 128, 256, 512), (0, 0, 0, 0), (4096,), (50,), ""),
        ((64, 128, 256), (30, 40, 50), (256, 128), (50, 50), ""),
        ((32, 64), (20, 30), (256, 128), (0, 0), "base"),
    ]
    return [
        ModelConfig(k, kd, h, hd, num_classes=num_classes, input_shape=input_shape,
                    name=f"row{i + 1}", tag=tag)
        for i, (k, kd, h, hd, tag) in enumerate(rows)
    ]


def preset(tag: str, **kwargs) -> ModelConfig:
    for cfg in ablation_presets(**kwargs):
        if tag in (cfg.tag, cfg.name):
            return cfg
    raise ConfigError(f"no preset named {tag!r}")


def flatten_width(cfg: ModelConfig) -> int:
    """Closed-form width after the conv stack: same conv keeps size, pool floors by 2."""
    _, h, w = cfg.input_shape
    for i in range(len(cfg.conv_kernels)):
        if h < 2 or w < 2:
            raise ConfigError(f"spatial size {h}x{w} collapses at pool{i + 1}")
        h, w = h // 2, w // 2
    return cfg.conv_kernels[-1] * h * w


class Network:
    """Sequential stack ending in raw logits; softmax is applied by callers."""

    def __init__(self, layers: list[Layer], config: ModelConfig | None = None):
        self.layers = layers
        self.config = config
        self.shapes: dict[str, tuple[int, ...]] = {}
        if config is not None:
            self._trace_shapes(config.input_shape)

    def _trace_shapes(self, shape):
        for layer in self.layers:
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ConfigError(f"layer {layer.name}: {exc}") from exc
            self.shapes[layer.name] = shape

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_units

    def initialize(self, seed: int):
        root = RngStream(seed, "init")
        for i, layer in enumerate(self.layers):
            if hasattr(layer, "initialize"):
                layer.initialize(root.derive(layer.name, i))
        self.reset_dropout(seed)
        return self

    def reset_dropout(self, seed: int):
        root = RngStream(seed, "dropout")
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dropout):
                layer.stream = root.derive(layer.name, i)

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training=training)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self):
        for layer in self.layers:
            for key, value in layer.params.items():
                yield f"{layer.name}.{key}", layer, key, value

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: value.copy() for name, _, _, value in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for name, layer, key, value in self.parameters():
            if name not in state:
                raise ShapeError(f"missing tensor {name}")
            new = np.asarray(state[name], dtype=np.float64)
            if new.shape != value.shape:
                raise ShapeError(f"{name}: shape {new.shape} != expected {value.shape}")
            layer.params[key] = new.copy()

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{layer.name}.{key}": layer.grads[key]
                for layer in self.layers for key in layer.params}


def build_model(cfg: ModelConfig, seed: int | None = None) -> Network:
    """[conv-relu-pool-dropout] x n -> flatten -> [dense-relu-dropout] x m -> dense."""
    cfg.validate()
    layers: list[Layer] = []
    channels = cfg.input_shape[0]
    for i, (k, p) in enumerate(zip(cfg.conv_kernels, cfg.conv_dropout_pct), start=1):
        layers += [Conv2D(channels, k, name=f"conv{i}"), ReLU(name=f"conv{i}_relu"),
                   MaxPool2D(name=f"pool{i}")]
        if p:
            layers.append(Dropout(p / 100.0, name=f"conv{i}_dropout"))
        channels = k
    layers.append(Flatten(name="flatten"))
    width = flatten_width(cfg)
    for i, (u, p) in enumerate(zip(cfg.hidden_units, cfg.hidden_dropout_pct), start=1):
        layers += [Dense(width, u, name=f"dense{i}"), ReLU(name=f"dense{i}_relu")]
        if p:
            layers.append(Dropout(p / 100.0, name=f"dense{i}_dropout"))
        width = u
    layers.append(Dense(width, cfg.num_classes, name="output"))
    net = Network(layers, cfg)
    if seed is not None:
        net.initialize(seed)
    return net
