"""Modified AlexNet for 200x26 RF patches.

The layer table lives in :func:`layer_spec`; both the pure shape arithmetic
(:func:`shape_trace`) and the torch module are built from it, so the two
cannot drift apart.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .errors import DimensionMismatch, ShapeUnderflow


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | maxpool | dropout | fc
    out: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    relu: bool = False


INIT_SCHEMES = ("alexnet", "he")


@dataclass(frozen=True)
class NetworkConfig:
    input_channels: int = 1
    input_shape: tuple = (200, 26)
    n_classes: int = 3
    dropout_p: float = 0.5
    # <1 shrinks every conv/fc width; used only by the CPU desk profile
    width_scale: float = 1.0
    # "alexnet": N(0, std^2) weights with unit biases; "he": N(0, 2/fan_in), zero biases
    init_scheme: str = "alexnet"
    # alexnet only. None: 0.01 at full width, 0.01 / sqrt(width_scale) when narrowed
    init_std: Optional[float] = None

    def __post_init__(self):
        if self.input_channels not in (1, 2):
            raise ValueError(f"input_channels must be 1 or 2, got {self.input_channels}")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")
        if not 0 < self.width_scale <= 1:
            raise ValueError("width_scale must lie in (0, 1]")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"init_scheme must be one of {INIT_SCHEMES}, got {self.init_scheme!r}")
        if self.init_std is not None and not self.init_std > 0:
            raise ValueError("init_std must be positive")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{**d, "input_shape": tuple(d["input_shape"])})


def _w(n: int, scale: float) -> int:
    return max(1, int(round(n * scale)))


def layer_spec(config: NetworkConfig) -> tuple[LayerSpec, ...]:
    s = config.width_scale
    return (
        LayerSpec("conv1", "conv", _w(96, s), 11, 4, 0, True),
        LayerSpec("conv2", "conv", _w(256, s), 5, 1, 2, True),
        LayerSpec("conv3", "conv", _w(384, s), 3, 1, 1, True),
        LayerSpec("conv4", "conv", _w(384, s), 3, 1, 1, True),
        LayerSpec("conv5", "conv", _w(256, s), 3, 1, 1, True),
        LayerSpec("maxpool1", "maxpool", 0, 3, 2, 0),
        LayerSpec("dropout1", "dropout"),
        LayerSpec("fc1", "fc", _w(4096, s), relu=True),
        LayerSpec("dropout2", "dropout"),
        LayerSpec("fc2", "fc", _w(4096, s), relu=True),
        LayerSpec("fc3", "fc", config.n_classes),
    )


@dataclass
class ShapeTrace:
    """Per-layer outputs as (axial, lateral, channels) or (features,), plus parameter counts."""

    layers: list = field(default_factory=list)  # (name, shape)
    params: dict = field(default_factory=dict)  # name -> parameter count
    flatten: int = 0

    def shape_of(self, name: str) -> tuple:
        for n, shape in self.layers:
            if n == name:
                return shape
        raise KeyError(name)

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    def format(self) -> str:
        rows = [f"{'layer':<10}{'output':>18}{'params':>14}"]
        for name, shape in self.layers:
            rows.append(f"{name:<10}{' x '.join(map(str, shape)):>18}{self.params.get(name, 0):>14,}")
        rows.append(f"{'total':<10}{'':>18}{self.total_params:>14,}")
        return "\n".join(rows)


def _out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def shape_trace(config: NetworkConfig = NetworkConfig()) -> ShapeTrace:
    trace = ShapeTrace()
    h, w = config.input_shape
    c = config.input_channels
    features = None
    for layer in layer_spec(config):
        if layer.kind in ("conv", "maxpool"):
            h2, w2 = _out(h, layer.kernel, layer.stride, layer.pad), _out(w, layer.kernel, layer.stride, layer.pad)
            if h2 < 1 or w2 < 1:
                raise ShapeUnderflow(f"{layer.name}: input {h}x{w} shrinks to {h2}x{w2}")
            if layer.kind == "conv":
                trace.params[layer.name] = layer.kernel * layer.kernel * c * layer.out + layer.out
                c = layer.out
            h, w = h2, w2
            trace.layers.append((layer.name, (h, w, c)))
        elif layer.kind == "dropout":
            if features is None:
                features = h * w * c
                trace.flatten = features
                trace.layers.append(("flatten", (features,)))
        else:
            trace.params[layer.name] = features * layer.out + layer.out
            features = layer.out
            trace.layers.append((layer.name, (features,)))
    return trace


class ZoneNet(nn.Module):
    """Torch realization of :func:`layer_spec`. Input is (N, C, axial, lateral)."""

    def __init__(self, config: NetworkConfig = NetworkConfig(), init_seed: Optional[int] = None):
        super().__init__()
        self.config = config
        self.init_seed = init_seed
        trace = shape_trace(config)
        in_ch, in_feat = config.input_channels, trace.flatten
        for layer in layer_spec(config):
            if layer.kind == "conv":
                setattr(self, layer.name, nn.Conv2d(in_ch, layer.out, layer.kernel, layer.stride, layer.pad))
                in_ch = layer.out
            elif layer.kind == "maxpool":
                setattr(self, layer.name, nn.MaxPool2d(layer.kernel, layer.stride))
            elif layer.kind == "dropout":
                setattr(self, layer.name, nn.Dropout(config.dropout_p))
            else:
                setattr(self, layer.name, nn.Linear(in_feat, layer.out))
                in_feat = layer.out
        self._spec = layer_spec(config)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self._spec:
            if layer.kind == "dropout" and x.ndim == 4:
                x = torch.flatten(x, 1)
            x = getattr(self, layer.name)(x)
            if layer.relu:
                x = torch.relu(x)
        return x


# biases set to one in the original AlexNet: conv2, conv4, conv5 and the hidden fc layers
ONE_BIAS_LAYERS = frozenset({"conv2", "conv4", "conv5", "fc1", "fc2"})


def init_model(config: NetworkConfig = NetworkConfig(), seed: int = 0,
               weight_std: Optional[float] = None) -> ZoneNet:
    """Build a network with the configured initialization.

    ``alexnet``: weights ~ N(0, std^2) with positional unit biases. ``std``
    comes from ``weight_std``, then ``config.init_std``, then 0.01 at full
    width. Narrowed networks default to 0.01 / sqrt(width_scale) so
    fan_in * std^2 matches the full-width net.

    ``he``: weights ~ N(0, 2 / fan_in) per layer, zero biases. Passing
    ``weight_std`` forces the alexnet rule.
    """
    he = config.init_scheme == "he" and weight_std is None
    if weight_std is None:
        weight_std = config.init_std
    if weight_std is None:
        weight_std = 0.01 / math.sqrt(config.width_scale)
    torch.manual_seed(seed)  # keeps torch's own default init from touching other streams
    model = ZoneNet(config, init_seed=seed)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for layer in layer_spec(config):
            if layer.kind not in ("conv", "fc"):
                continue
            mod = getattr(model, layer.name)
            if he:
                mod.weight.normal_(0.0, math.sqrt(2.0 / mod.weight[0].numel()), generator=g)
                mod.bias.zero_()
            else:
                mod.weight.normal_(0.0, weight_std, generator=g)
                mod.bias.fill_(1.0 if layer.name in ONE_BIAS_LAYERS else 0.0)
    return model


def as_batch(batch, config: NetworkConfig) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(batch) if not isinstance(batch, torch.Tensor) else batch,
                        dtype=torch.float32)
    if x.ndim == 3:
        x = x.unsqueeze(1)
    expected = (config.input_channels, *config.input_shape)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise DimensionMismatch(f"batch shape {tuple(x.shape)} does not match (N, {expected})")
    return x


def forward(model: ZoneNet, batch, train_mode: bool = False) -> torch.Tensor:
    """Raw logits (N, n_classes). Dropout is active iff ``train_mode``."""
    x = as_batch(batch, model.config)
    model.train(train_mode)
    if train_mode:
        return model(x)
    with torch.no_grad():
        return model(x)


def named_parameters(model: ZoneNet) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def load_parameters(model: ZoneNet, params: dict[str, np.ndarray]) -> ZoneNet:
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in params.items()})
    return model
