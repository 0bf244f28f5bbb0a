"""Layers, normalization schemes and weight standardization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

NORM_EPS = 1e-5
WS_EPS = 1e-4
BN_MOMENTUM = 0.1
GN_DEFAULT_GROUPS = 32

NORM_KINDS = ("bn", "ln", "gn", "none")


# ------------------------------------------------------------------ functional


def _normalize(x: Tensor, axes: tuple[int, ...], eps: float) -> Tensor:
    return T.standardize(x, axes, eps)


def normalize_composite(x: Tensor, axes: tuple[int, ...], eps: float) -> Tensor:
    """Unfused reference for ``T.standardize`` built from elementary primitives."""
    mu = T.mean(x, axes, keepdims=True)
    xc = x - mu
    var = T.mean(xc * xc, axes, keepdims=True)
    return xc / T.sqrt(var + eps)


def _channel_shape(x: Tensor) -> tuple[int, ...]:
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


def _affine(x: Tensor, scale: Tensor | None, shift: Tensor | None) -> Tensor:
    shape = _channel_shape(x)
    if scale is not None:
        x = x * T.reshape(scale, shape)
    if shift is not None:
        x = x + T.reshape(shift, shape)
    return x


def weight_standardize(w: Tensor, eps: float = WS_EPS) -> Tensor:
    """Standardize each output row of ``w`` over its fan-in.

    Row i becomes ``(w_i - mean_i) / sqrt(var_i + eps)`` where mean and
    population variance run over the R = in_channels * k * k entries.
    Gradients reach the raw weight through the standardization.
    """
    if w.ndim < 2:
        raise T.DimensionError(f"weight_standardize: need >= 2 dims, got {w.shape}")
    return _normalize(w, tuple(range(1, w.ndim)), eps)


def batch_norm(
    x: Tensor,
    scale: Tensor | None,
    shift: Tensor | None,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = NORM_EPS,
) -> Tensor:
    axes = (0,) + tuple(range(2, x.ndim))
    if training:
        if x.shape[0] < 2:
            raise ContractError("batch_norm: training mode needs a batch of at least 2")
        out, mu, var = T.standardize(x, axes, eps, return_stats=True)
        if running_mean is not None:
            count = x.size // x.shape[1]
            running_mean *= 1 - momentum
            running_mean += momentum * mu.reshape(-1)
            running_var *= 1 - momentum
            running_var += momentum * var.reshape(-1) * (count / max(count - 1, 1))
    else:
        shape = _channel_shape(x)
        mu = running_mean.reshape(shape).astype(x.dtype)
        inv = (1.0 / np.sqrt(running_var + eps)).reshape(shape).astype(x.dtype)
        out = (x - mu) * inv
    return _affine(out, scale, shift)


def layer_norm(x: Tensor, scale: Tensor | None, shift: Tensor | None, eps: float = NORM_EPS) -> Tensor:
    """Per-sample normalization over every non-batch axis, per-channel affine."""
    return _affine(_normalize(x, tuple(range(1, x.ndim)), eps), scale, shift)


def group_norm(
    x: Tensor, groups: int, scale: Tensor | None, shift: Tensor | None, eps: float = NORM_EPS
) -> Tensor:
    n, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ContractError(f"group_norm: {groups} groups do not divide {c} channels")
    rest = x.shape[2:]
    xg = T.reshape(x, (n, groups, c // groups) + rest)
    out = _normalize(xg, tuple(range(2, xg.ndim)), eps)
    return _affine(T.reshape(out, x.shape), scale, shift)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with ``w`` stored as (in_features, out_features)."""
    out = T.matmul(x, w)
    return out + b if b is not None else out


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | int | None = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout: rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * keep


def default_groups(channels: int, groups: int = GN_DEFAULT_GROUPS) -> int:
    """Largest group count <= ``groups`` that divides ``channels``."""
    g = max(1, min(groups, channels))
    while channels % g:
        g -= 1
    return g


# --------------------------------------------------------------------- modules


class Module:
    training = True

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                out[prefix + name] = value
        for name, child in self.children():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in getattr(self, "_buffers", ()):
            out[prefix + name] = getattr(self, name)
        for name, child in self.children():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Identity(Module):
    def forward(self, x):
        return x


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / np.sqrt(in_features)
        self.weight = T.parameter(rng.uniform(-bound, bound, (in_features, out_features)))
        self.bias = T.parameter(rng.uniform(-bound, bound, out_features)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = False,
        standardize: bool = False,
        ws_eps: float = WS_EPS,
    ):
        fan_in = in_channels * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        self.weight = T.parameter(rng.normal(0.0, std, (out_channels, in_channels, kernel, kernel)))
        self.bias = T.parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = padding
        self.standardize = standardize
        self.ws_eps = ws_eps

    def effective_weight(self) -> Tensor:
        return weight_standardize(self.weight, self.ws_eps) if self.standardize else self.weight

    def forward(self, x):
        out = T.conv2d(x, self.effective_weight(), self.stride, self.padding)
        if self.bias is not None:
            out = out + T.reshape(self.bias, (1, -1, 1, 1))
        return out


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = NORM_EPS, momentum: float = BN_MOMENTUM):
        self.scale = T.parameter(np.ones(channels))
        self.shift = T.parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=T.get_default_dtype())
        self.running_var = np.ones(channels, dtype=T.get_default_dtype())
        self.eps = eps
        self.momentum = momentum
        self.frozen = False

    def forward(self, x):
        # frozen: batch statistics still normalize in training mode, but the
        # running estimates are neither updated nor required until inference
        track = not (self.frozen and self.training)
        return batch_norm(
            x,
            self.scale,
            self.shift,
            self.running_mean if track else None,
            self.running_var if track else None,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = NORM_EPS):
        self.scale = T.parameter(np.ones(channels))
        self.shift = T.parameter(np.zeros(channels))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.scale, self.shift, self.eps)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = GN_DEFAULT_GROUPS, eps: float = NORM_EPS):
        if channels % groups:
            raise ContractError(f"GroupNorm: {groups} groups do not divide {channels} channels")
        self.groups = groups
        self.scale = T.parameter(np.ones(channels))
        self.shift = T.parameter(np.zeros(channels))
        self.eps = eps

    def forward(self, x):
        return group_norm(x, self.groups, self.scale, self.shift, self.eps)


class Dropout(Module):
    def __init__(self, rate: float, seed: int | None = None):
        if not 0.0 <= rate < 1.0:
            raise ContractError(f"Dropout: rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = np.random.default_rng(seed)

    def forward(self, x):
        return dropout(x, self.rate, self.training, self.rng)


@dataclass(frozen=True)
class NormKind:
    """Which normalization follows a conv or hidden linear layer."""

    kind: str = "bn"
    groups: int = GN_DEFAULT_GROUPS

    def __post_init__(self):
        if self.kind not in NORM_KINDS:
            raise ContractError(f"unknown norm kind {self.kind!r}; expected one of {NORM_KINDS}")
        if self.groups < 1:
            raise ContractError("group count must be positive")

    def build(self, channels: int) -> Module:
        if self.kind == "bn":
            return BatchNorm(channels)
        if self.kind == "ln":
            return LayerNorm(channels)
        if self.kind == "gn":
            return GroupNorm(channels, default_groups(channels, self.groups))
        return Identity()


def freeze_batch_stats(module: Module, frozen: bool = True) -> None:
    for m in module.modules():
        if isinstance(m, BatchNorm):
            m.frozen = frozen
