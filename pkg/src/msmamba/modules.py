"""Parameter containers and basic trainable layers.

``Module`` auto-registers ``Parameter`` and child ``Module`` attributes in
assignment order, so ``named_parameters()`` yields a stable dotted-name
ordering — the checkpoint format and the optimizer both rely on it.
"""

from __future__ import annotations

from typing import Iterator, List, Tuple

import numpy as np

from . import ops
from .tensor import ContractViolation, Tensor


class Parameter(Tensor):
    """A Tensor registered as trainable state of a Module."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class: attribute assignment registers parameters and children."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items = []
        for m in items:
            self.append(m)

    def append(self, m: Module) -> None:
        self._children[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32):
    """Normal(0, std) clipped to ±2 std."""
    v = rng.standard_normal(shape) * std
    return np.clip(v, -2 * std, 2 * std).astype(dtype)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator = None, dtype=np.float32):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        self.weight = Parameter(trunc_normal(rng, (out_features, in_features), dtype=dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1,
                 padding: str = "reflect", bias: bool = True,
                 rng: np.random.Generator = None, dtype=np.float32):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        if k % 2 == 0:
            raise ContractViolation(f"kernel size must be odd, got {k}")
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(trunc_normal(rng, (out_ch, in_ch, k, k), dtype=dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, k: int = 3, bias: bool = True,
                 rng: np.random.Generator = None, dtype=np.float32):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        self.weight = Parameter(trunc_normal(rng, (channels, 1, k, k), dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv2d(x, self.weight, self.bias)


class LayerNorm(Module):
    """Normalization over one axis (channel axis 1 for maps, -1 for sequences)."""

    def __init__(self, channels: int, axis: int = 1, eps: float = 1e-6, dtype=np.float32):
        super().__init__()
        self.axis = axis
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, eps=self.eps, axis=self.axis)


class LayerScale(Module):
    """Per-channel multiplier on a residual branch; 0-init makes the branch
    a no-op at the start of training."""

    def __init__(self, channels: int, init: float = 1.0, dtype=np.float32):
        super().__init__()
        self.scale = Parameter(np.full(channels, init, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        s = ops.reshape(self.scale, (1, self.scale.shape[0], 1, 1))
        return ops.mul(x, s)
