"""Translator (multi-scale encoder-decoder) and patch-map discriminator."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, Tuple

import numpy as np

from .layers import (
    ConvSpec,
    LayerParams,
    avg_pool_downsample,
    concat_channels,
    conv2d,
    conv2d_transpose,
    init_params,
    instance_norm,
    leaky_relu,
    pad2d,
    relu,
    sigmoid,
    tanh,
)
from .tensor import ContractError, DimensionError, Node

__all__ = [
    "DiscriminatorConfig",
    "NetworkParams",
    "TranslatorConfig",
    "build_discriminator",
    "build_translator",
    "discriminator_forward",
    "named_tensors",
    "parameter_count",
    "random_input",
    "translator_forward",
]

LEAK = 0.2


@dataclass(frozen=True)
class TranslatorConfig:
    in_channels: int = 1
    out_channels: int = 3
    ngf: int = 50
    depth: int = 6
    input_size: int = 256

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.ngf, self.depth) < 1:
            raise ContractError(f"invalid {self}")
        if self.input_size % (2 ** self.depth) or self.input_size // 2 ** self.depth < 2:
            raise ContractError(
                f"input_size {self.input_size} must be divisible by 2^{self.depth} with bottleneck >= 2"
            )

    def width(self, scale: int) -> int:
        """Channels of the encoder features at the given scale (1-based)."""
        return self.ngf * min(2 ** (scale - 1), 8)


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 3
    ndf: int = 64
    n_stride2: int = 3
    input_size: int = 256

    def __post_init__(self):
        if min(self.in_channels, self.ndf, self.n_stride2) < 1:
            raise ContractError(f"invalid {self}")
        if self.input_size % (2 ** self.n_stride2) or self.output_size < 2:
            raise ContractError(
                f"input_size {self.input_size} must be divisible by 2^{self.n_stride2} with output map >= 2"
            )

    @property
    def output_size(self) -> int:
        return self.input_size // 2 ** self.n_stride2


class NetworkParams(OrderedDict):
    """Ordered ``layer name -> LayerParams`` with the config that built it."""

    def __init__(self, config, name: str):
        super().__init__()
        self.config = config
        self.name = name


def named_tensors(net: NetworkParams) -> Iterator[Tuple[str, Node]]:
    """Yield ``("<net>/<layer>.<field>", node)`` in deterministic order."""
    for layer_name, layer in net.items():
        for field, node in layer.tensors():
            yield f"{net.name}/{layer_name}.{field}", node


def parameter_count(net: NetworkParams) -> int:
    return sum(node.size for _, node in named_tensors(net))


_DOWN = dict(kernel=4, stride=2, padding=1)


def build_translator(cfg: TranslatorConfig, seed: int, name: str = "T") -> NetworkParams:
    """Encoder ``enc0..`` (k4 s2), decoder ``dec..`` (transposed k4 s2), output ``out`` (k3 s1).

    Decoder block ``dec{j-1}`` reads scale ``j``: the decoder stream, the
    encoder features at that scale and the input average-pooled to it.
    At the bottleneck the decoder stream *is* the encoder output, so only
    the pooled input is appended.
    """
    net = NetworkParams(cfg, name)
    d, cin = cfg.depth, cfg.in_channels

    def add(layer, spec, **kw):
        net[layer] = init_params(spec, seed, f"{name}/{layer}", **kw)

    prev = cin
    for i in range(d):
        out = cfg.width(i + 1)
        add(f"enc{i}", ConvSpec(prev, out, **_DOWN), bias=(i == 0), norm=(i > 0))
        prev = out

    stream = cfg.width(d)
    for j in range(d, 0, -1):
        skip = 0 if j == d else cfg.width(j)
        out = cfg.width(j - 1) if j > 1 else cfg.ngf
        add(f"dec{j - 1}", ConvSpec(stream + skip + cin, out, **_DOWN), transpose=True, bias=False, norm=True)
        stream = out
    add("out", ConvSpec(stream + cin, cfg.out_channels, kernel=3, stride=1, padding=1))
    return net


def _spec(layer: LayerParams, transpose: bool = False, **kw) -> ConvSpec:
    w = layer.weight.shape
    cin, cout = (w[0], w[1]) if transpose else (w[1], w[0])
    kw.pop("kernel", None)
    return ConvSpec(cin, cout, kernel=w[2], **kw)


def _check_image(x: Node, channels: int, size: int, who: str) -> None:
    if x.value.ndim != 4 or x.shape[1] != channels or x.shape[2] != size or x.shape[3] != size:
        raise DimensionError(f"{who} expects input [N,{channels},{size},{size}], got {list(x.shape)}")


def translator_forward(net: NetworkParams, x: Node) -> Node:
    cfg: TranslatorConfig = net.config
    _check_image(x, cfg.in_channels, cfg.input_size, "translator")
    d = cfg.depth

    feats: Dict[int, Node] = {}
    h = x
    for i in range(d):
        layer = net[f"enc{i}"]
        h = conv2d(h, _spec(layer, **_DOWN), layer)
        if layer.scale is not None:
            h = instance_norm(h, layer)
        h = leaky_relu(h, LEAK)
        feats[i + 1] = h

    stream = feats[d]
    for j in range(d, 0, -1):
        parts = [stream] if j == d else [stream, feats[j]]
        parts.append(avg_pool_downsample(x, 2 ** j))
        layer = net[f"dec{j - 1}"]
        h = conv2d_transpose(concat_channels(parts), _spec(layer, transpose=True, **_DOWN), layer)
        stream = relu(instance_norm(h, layer))

    layer = net["out"]
    h = conv2d(concat_channels([stream, x]), _spec(layer, stride=1, padding=1), layer)
    return tanh(h)


def build_discriminator(cfg: DiscriminatorConfig, seed: int, name: str = "D") -> NetworkParams:
    """``n_stride2`` k4 s2 convs, then two k4 s1 same-padded convs down to one channel."""
    net = NetworkParams(cfg, name)

    def add(layer, spec, **kw):
        net[layer] = init_params(spec, seed, f"{name}/{layer}", **kw)

    prev = cfg.in_channels
    for i in range(cfg.n_stride2):
        out = cfg.ndf * min(2 ** i, 8)
        add(f"conv{i}", ConvSpec(prev, out, **_DOWN), bias=(i == 0), norm=(i > 0))
        prev = out
    add("same0", ConvSpec(prev, cfg.ndf * 8, kernel=4), bias=False, norm=True)
    add("same1", ConvSpec(cfg.ndf * 8, 1, kernel=4))
    return net


def _same4(h: Node) -> Node:
    # total padding 3 for a 4x4 kernel: 1 before, 2 after
    return pad2d(h, 1, 2, 1, 2)


def discriminator_forward(net: NetworkParams, x: Node) -> Node:
    """Per-patch probability map ``[N, 1, s, s]`` with values in (0, 1)."""
    cfg: DiscriminatorConfig = net.config
    _check_image(x, cfg.in_channels, cfg.input_size, "discriminator")
    h = x
    for i in range(cfg.n_stride2):
        layer = net[f"conv{i}"]
        h = conv2d(h, _spec(layer, **_DOWN), layer)
        if layer.scale is not None:
            h = instance_norm(h, layer)
        h = leaky_relu(h, LEAK)
    layer = net["same0"]
    h = leaky_relu(instance_norm(conv2d(_same4(h), _spec(layer), layer), layer), LEAK)
    layer = net["same1"]
    return sigmoid(conv2d(_same4(h), _spec(layer), layer))


def random_input(cfg, n: int = 1, seed: int = 0) -> Node:
    """Uniform [-1, 1] batch shaped for ``cfg`` (translator or discriminator)."""
    rng = np.random.default_rng(seed)
    shape = (n, cfg.in_channels, cfg.input_size, cfg.input_size)
    return Node(rng.uniform(-1, 1, size=shape).astype(np.float32))
