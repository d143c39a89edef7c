"""Differentiable network layers over :class:`~sar2opt.tensor.Node`.

Every layer is a single graph operation with a hand-written backward pass,
NCHW layout throughout.  Convolutions are vectorised through strided
window views so that one call is a single tensor contraction.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError, DimensionError, Node, note_kink, unary

__all__ = [
    "ConvSpec",
    "LayerParams",
    "avg_pool_downsample",
    "concat_channels",
    "conv2d",
    "conv2d_transpose",
    "init_params",
    "instance_norm",
    "layer_rng",
    "leaky_relu",
    "pad2d",
    "relu",
    "sigmoid",
    "tanh",
]

INIT_STD = 0.02
NORM_EPS = 1e-5


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1 or self.kernel < 1 or self.stride < 1:
            raise ContractError(f"invalid {self}")
        if self.padding < 0:
            raise ContractError(f"negative padding in {self}")

    def output_size(self, size: int) -> int:
        out = (size + 2 * self.padding - self.kernel) // self.stride + 1
        if out < 1:
            raise DimensionError(f"{self} gives output size {out} for input size {size}")
        return out

    def transpose_output_size(self, size: int) -> int:
        out = (size - 1) * self.stride - 2 * self.padding + self.kernel
        if out < 1:
            raise DimensionError(f"{self} transposed gives output size {out} for input size {size}")
        return out


@dataclass
class LayerParams:
    """Trainable tensors of one layer.

    Convolution weights are ``[out, in, k, k]``; transposed-convolution
    weights use the adjoint layout ``[in, out, k, k]``.
    """

    name: str
    weight: Node
    bias: Optional[Node] = None
    scale: Optional[Node] = None
    shift: Optional[Node] = None

    def tensors(self):
        for field in ("weight", "bias", "scale", "shift"):
            node = getattr(self, field)
            if node is not None:
                yield field, node


def layer_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed on (seed, layer name), independent of build order."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, zlib.crc32(name.encode())])))


def init_params(
    spec: ConvSpec,
    seed: int,
    name: str = "layer",
    transpose: bool = False,
    bias: bool = True,
    norm: bool = False,
) -> LayerParams:
    """Normal(0, 0.02) weights, zero bias, unit norm scale and zero shift."""
    rng = layer_rng(seed, name)
    if transpose:
        shape = (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel)
    else:
        shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
    w = rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)
    params = LayerParams(name=name, weight=Node(w, requires_grad=True))
    if bias:
        params.bias = Node(np.zeros(spec.out_channels, np.float32), requires_grad=True)
    if norm:
        params.scale = Node(np.ones(spec.out_channels, np.float32), requires_grad=True)
        params.shift = Node(np.zeros(spec.out_channels, np.float32), requires_grad=True)
    return params


# -- convolution kernels on raw arrays ---------------------------------------


def _windows(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    # [N, C, Ho, Wo, k, k] view onto the padded input
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_forward(x: np.ndarray, w: np.ndarray, s: int, p: int) -> np.ndarray:
    k = w.shape[2]
    xp = _pad(x, p)
    ho = (xp.shape[2] - k) // s + 1
    wo = (xp.shape[3] - k) // s + 1
    win = _windows(xp, k, s, ho, wo)
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # [N, Ho, Wo, O]
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def _conv_input_grad(gy: np.ndarray, w: np.ndarray, in_hw: Tuple[int, int], s: int, p: int) -> np.ndarray:
    n, _, ho, wo = gy.shape
    c, k = w.shape[1], w.shape[2]
    hp, wp = in_hw[0] + 2 * p, in_hw[1] + 2 * p
    cols = np.tensordot(gy, w, axes=([1], [0]))  # [N, Ho, Wo, C, k, k]
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # [N, C, k, k, Ho, Wo]
    gxp = np.zeros((n, c, hp, wp), dtype=np.result_type(gy, w))
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += cols[:, :, i, j]
    if p:
        gxp = gxp[:, :, p : p + in_hw[0], p : p + in_hw[1]]
    return np.ascontiguousarray(gxp)


def _conv_weight_grad(gy: np.ndarray, x: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    ho, wo = gy.shape[2], gy.shape[3]
    win = _windows(_pad(x, p), k, s, ho, wo)
    return np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))  # [O, C, k, k]


# -- graph layers -------------------------------------------------------------


def _check_input(x: Node, spec: ConvSpec, channels: int) -> None:
    if x.value.ndim != 4:
        raise DimensionError(f"expected [N,C,H,W] input, got shape {x.shape}")
    if x.shape[1] != channels:
        raise DimensionError(f"channel mismatch: input has {x.shape[1]} channels, {spec} expects {channels}")


def conv2d(x: Node, spec: ConvSpec, params: LayerParams) -> Node:
    _check_input(x, spec, spec.in_channels)
    spec.output_size(x.shape[2])
    spec.output_size(x.shape[3])
    w_node, b_node = params.weight, params.bias
    xv, wv = x.value, w_node.value
    k, s, p = spec.kernel, spec.stride, spec.padding
    y = _conv_forward(xv, wv, s, p)
    if b_node is not None:
        y += b_node.value.reshape(1, -1, 1, 1)

    def bw(g):
        gx = _conv_input_grad(g, wv, xv.shape[2:], s, p) if x.requires_grad else None
        gw = _conv_weight_grad(g, xv, k, s, p) if w_node.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b_node is not None else None
        return gx, gw, gb

    parents = (x, w_node) if b_node is None else (x, w_node, b_node)
    return Node._result(y, parents, bw, "conv2d")


def conv2d_transpose(x: Node, spec: ConvSpec, params: LayerParams) -> Node:
    """Adjoint of :func:`conv2d` for the same kernel/stride/padding."""
    _check_input(x, spec, spec.in_channels)
    ho = spec.transpose_output_size(x.shape[2])
    wo = spec.transpose_output_size(x.shape[3])
    w_node, b_node = params.weight, params.bias
    xv, wv = x.value, w_node.value
    k, s, p = spec.kernel, spec.stride, spec.padding
    y = _conv_input_grad(xv, wv, (ho, wo), s, p)
    if b_node is not None:
        y += b_node.value.reshape(1, -1, 1, 1)

    def bw(g):
        gx = _conv_forward(g, wv, s, p) if x.requires_grad else None
        gw = _conv_weight_grad(xv, g, k, s, p) if w_node.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b_node is not None else None
        return gx, gw, gb

    parents = (x, w_node) if b_node is None else (x, w_node, b_node)
    return Node._result(y, parents, bw, "conv2d_transpose")


def pad2d(x: Node, top: int, bottom: int, left: int, right: int) -> Node:
    """Zero padding with independent amounts per side."""
    h, w = x.shape[2], x.shape[3]
    y = np.pad(x.value, ((0, 0), (0, 0), (top, bottom), (left, right)))
    return Node._result(y, (x,), lambda g: (g[:, :, top : top + h, left : left + w],), "pad2d")


def leaky_relu(x: Node, slope: float = 0.2) -> Node:
    xv = x.value
    note_kink(xv)
    pos = xv > 0
    return unary(x, np.where(pos, xv, xv * slope), lambda: np.where(pos, 1.0, slope).astype(xv.dtype), "leaky_relu")


def relu(x: Node) -> Node:
    xv = x.value
    note_kink(xv)
    pos = xv > 0
    return unary(x, np.where(pos, xv, 0).astype(xv.dtype), lambda: pos.astype(xv.dtype), "relu")


def tanh(x: Node) -> Node:
    y = np.tanh(x.value)
    return unary(x, y, lambda: 1 - y * y, "tanh")


def sigmoid(x: Node) -> Node:
    # tanh form avoids exp overflow for large |x|
    y = 0.5 * (1 + np.tanh(0.5 * x.value))
    return unary(x, y, lambda: y * (1 - y), "sigmoid")


def instance_norm(x: Node, params: LayerParams) -> Node:
    """Per-sample, per-channel normalisation over H and W, then affine."""
    if x.value.ndim != 4:
        raise DimensionError(f"expected [N,C,H,W] input, got shape {x.shape}")
    m = x.shape[2] * x.shape[3]
    if m < 2:
        raise ContractError(f"instance_norm needs at least 2 spatial elements, got shape {x.shape}")
    scale, shift = params.scale, params.shift
    xv = x.value
    mu = xv.mean(axis=(2, 3), keepdims=True)
    centred = xv - mu
    var = (centred * centred).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = centred * inv
    gamma = scale.value.reshape(1, -1, 1, 1)
    y = xhat * gamma + shift.value.reshape(1, -1, 1, 1)

    def bw(g):
        gxhat = g * gamma
        s1 = gxhat.sum(axis=(2, 3), keepdims=True)
        s2 = (gxhat * xhat).sum(axis=(2, 3), keepdims=True)
        gx = (inv / m) * (m * gxhat - s1 - xhat * s2)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Node._result(y, (x, scale, shift), bw, "instance_norm")


def avg_pool_downsample(x: Node, factor: int) -> Node:
    """Non-overlapping ``factor``x``factor`` box average."""
    if factor == 1:
        return x
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise DimensionError(f"spatial size {h}x{w} is not divisible by factor {factor}")
    y = x.value.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    area = factor * factor

    def bw(g):
        up = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
        return (up / area,)

    return Node._result(y, (x,), bw, "avg_pool")


def concat_channels(xs: Sequence[Node]) -> Node:
    xs = list(xs)
    if not xs:
        raise ContractError("concat_channels needs at least one input")
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    for x in xs[1:]:
        if x.value.ndim != 4 or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise DimensionError(f"cannot concatenate shapes {ref} and {x.shape} along channels")
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])
    y = np.concatenate([x.value for x in xs], axis=1)

    def bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return Node._result(y, xs, bw, "concat")
