"""Layers and small networks built on :mod:`dynfuse.tensor`."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

__all__ = [
    "Module",
    "Linear",
    "Mlp",
    "SeFusionBlock",
    "WeightedAdd",
    "mlp_forward",
    "se_fuse",
    "weighted_add",
    "init_parameters",
]


def parameter(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


class Module:
    """Base class: parameters are discovered from attributes in declaration order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int):
        if in_dim <= 0 or out_dim <= 0:
            raise DimensionError(f"Linear dims must be positive, got {in_dim}->{out_dim}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = parameter((in_dim, out_dim), "weight")
        self.bias = parameter((out_dim,), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"Linear expects (batch, {self.in_dim}), got {x.shape}")
        return T.affine(x, self.weight, self.bias)


class Mlp(Module):
    """Affine layers with ``activation`` between them.

    The last layer is linear unless ``out_activation`` is given; feature
    extraction blocks use that to end on a nonlinearity.
    """

    def __init__(self, dims: Sequence[int], activation: str = "relu", out_activation: str | None = None):
        dims = list(dims)
        if len(dims) < 2:
            raise DimensionError(f"Mlp needs at least input and output dims, got {dims}")
        self.layers = [Linear(a, b) for a, b in zip(dims[:-1], dims[1:])]
        self.activation = activation
        self.out_activation = out_activation

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self, x)


def mlp_forward(net: Mlp, x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise DimensionError(f"Mlp expects (batch, {net.in_dim}), got {x.shape}")
    h = x
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        h = layer(h)
        if i < last:
            h = T.activation(net.activation, h)
        elif net.out_activation is not None:
            h = T.activation(net.out_activation, h)
    return h


class SeFusionBlock(Module):
    """Squeeze-and-excitation reweighting of two streams followed by a sum.

    Each stream ``x_m`` is scaled channel-wise by ``sigmoid(mlp_m(x_m))`` where
    ``mlp_m`` is ``d -> d/r -> d``.
    """

    def __init__(self, dim: int, reduction: int = 4):
        if reduction <= 0 or dim % reduction != 0:
            raise DimensionError(f"dim {dim} is not divisible by reduction ratio {reduction}")
        self.dim = dim
        self.reduction = reduction
        hidden = dim // reduction
        self.squeeze_mlp_1 = Mlp([dim, hidden, dim])
        self.squeeze_mlp_2 = Mlp([dim, hidden, dim])

    def __call__(self, x1: Tensor, x2: Tensor) -> Tensor:
        return se_fuse(self, x1, x2)


def se_fuse(block: SeFusionBlock, x1: Tensor, x2: Tensor) -> Tensor:
    if x1.shape != x2.shape or x1.ndim != 2 or x1.shape[1] != block.dim:
        raise DimensionError(f"se_fuse expects two (batch, {block.dim}) inputs, got {x1.shape}, {x2.shape}")
    gate1 = T.sigmoid(block.squeeze_mlp_1(x1))
    gate2 = T.sigmoid(block.squeeze_mlp_2(x2))
    return T.add(T.mul(x1, gate1), T.mul(x2, gate2))


class WeightedAdd(Module):
    """``w1 * x1 + w2 * x2`` with learnable scalars, initialised to (1, 1)."""

    def __init__(self):
        self.w = Tensor(np.ones(2), requires_grad=True, name="w")

    def __call__(self, x1: Tensor, x2: Tensor) -> Tensor:
        return weighted_add(self.w, x1, x2)


def _scalar(w: Tensor, i: int) -> Tensor:
    return T.reshape(T.column(T.reshape(w, (1, w.size)), i), ())


def weighted_add(w: Tensor, x1: Tensor, x2: Tensor) -> Tensor:
    if w.shape != (2,):
        raise DimensionError(f"weighted_add needs w of shape (2,), got {w.shape}")
    if x1.shape != x2.shape:
        raise DimensionError(f"weighted_add shape mismatch: {x1.shape} vs {x2.shape}")
    return T.add(T.mul(_scalar(w, 0), x1), T.mul(_scalar(w, 1), x2))


def init_parameters(net: Module, seed: int | np.random.Generator, scheme: str = "uniform_fanin") -> None:
    """Weights ~ U(-1/sqrt(in_dim), 1/sqrt(in_dim)); biases zero.

    Parameters other than Linear weights/biases (e.g. WeightedAdd scalars)
    are left as constructed.
    """
    if scheme != "uniform_fanin":
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for layer in _linear_layers(net):
        bound = 1.0 / np.sqrt(layer.in_dim)
        layer.weight.data[...] = rng.uniform(-bound, bound, size=layer.weight.shape)
        layer.bias.data[...] = 0.0


def _linear_layers(obj) -> Iterator[Linear]:
    if isinstance(obj, Linear):
        yield obj
        return
    if isinstance(obj, Module):
        for value in vars(obj).values():
            yield from _linear_layers(value)
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            yield from _linear_layers(item)
