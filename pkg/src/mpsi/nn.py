"""Parameter containers: a small ``Module`` tree with hierarchical names."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import DTYPE, Parameter, Tensor

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples truncated to ``[-bound*std, bound*std]`` by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out.astype(DTYPE)


class Module:
    """Registers ``Parameter`` and ``Module`` attributes in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: Module) -> Module:
        setattr(self, name, module)
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy values in; raises ``KeyError``/``ValueError`` naming the offending parameter."""
        own = dict(self.named_parameters())
        for name in state:
            if name not in own:
                raise KeyError(f"unknown parameter {name!r}")
        for name, p in own.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            value = np.asarray(state[name], dtype=DTYPE)
            if value.shape != p.shape:
                raise ValueError(f"parameter {name!r}: checkpoint shape {value.shape} != model shape {p.shape}")
        for name, p in own.items():
            p.data = np.array(state[name], dtype=DTYPE)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Parameter(trunc_normal(rng, (out_dim, in_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear_projection(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class Conv2d(Module):
    """'Same'-padded stride-1 convolution on (B, C, H, W) maps."""

    def __init__(self, cin: int, cout: int, kernel_size: int, rng: np.random.Generator, depthwise: bool = False):
        super().__init__()
        if depthwise and cin != cout:
            raise ValueError("depthwise convolution needs cin == cout")
        kin = 1 if depthwise else cin
        self.weight = Parameter(trunc_normal(rng, (cout, kin, kernel_size, kernel_size)))
        self.bias = Parameter(np.zeros(cout))
        self.depthwise = depthwise
        self.padding = kernel_size // 2

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, padding=self.padding, depthwise=self.depthwise)


def to_map(x: Tensor, hw: tuple[int, int]) -> Tensor:
    """(B, H*W, C) token sequence -> (B, C, H, W) feature map."""
    b, n, c = x.shape
    h, w = hw
    return x.reshape(b, h, w, c).transpose(0, 3, 1, 2)


def to_seq(x: Tensor) -> Tensor:
    """(B, C, H, W) feature map -> (B, H*W, C) token sequence in raster order."""
    b, c, h, w = x.shape
    return x.transpose(0, 2, 3, 1).reshape(b, h * w, c)
