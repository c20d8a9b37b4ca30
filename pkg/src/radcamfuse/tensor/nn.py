"""Parameters and the small set of layers the pipeline is built from."""
from __future__ import annotations

import numpy as np

from . import ops
from .core import Tensor, get_dtype


class Parameter(Tensor):
    """A learnable leaf tensor with a name assigned at registration."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name


class Module:
    """Attribute-registered container of parameters and submodules."""

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self.__dict__.setdefault("_params", {})[key] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_modules", {})[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = ""):
        for k, p in self.__dict__.get("_params", {}).items():
            yield prefix + k, p
        for k, m in self.__dict__.get("_modules", {}).items():
            yield from m.named_parameters(prefix + k + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def finalize_names(self):
        """Stamp dotted names onto every parameter; each must be registered once."""
        seen = set()
        for name, p in self.named_parameters():
            if id(p) in seen:
                raise ValueError(f"parameter registered twice: {name}")
            seen.add(id(p))
            p.name = name
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict: bool = True):
        params = dict(self.named_parameters())
        if strict:
            missing = set(params) - set(state)
            extra = set(state) - set(params)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in state.items():
            if name not in params:
                continue
            p = params[name]
            if p.data.shape != tuple(arr.shape):
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = np.asarray(arr, dtype=p.data.dtype).copy()

    def cast(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def _he(rng, shape, fan_in, gain=2.0):
    return rng.normal(0.0, np.sqrt(gain / max(fan_in, 1)), size=shape).astype(get_dtype())


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng, bias: bool = True, gain: float = 2.0, zero: bool = False):
        w = np.zeros((cin, cout), dtype=get_dtype()) if zero else _he(rng, (cin, cout), cin, gain)
        self.weight = Parameter(w)
        if bias:
            self.bias = Parameter(np.zeros(cout, dtype=get_dtype()))
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng, stride: int = 1, bias: bool = True, gain: float = 2.0):
        self.weight = Parameter(_he(rng, (k, k, cin, cout), k * k * cin, gain))
        self.bias = Parameter(np.zeros(cout, dtype=get_dtype())) if bias else None
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class MLP(Module):
    """Linear -> ReLU -> Linear."""

    def __init__(self, cin: int, hidden: int, cout: int, rng):
        self.fc1 = Linear(cin, hidden, rng)
        self.fc2 = Linear(hidden, cout, rng, gain=1.0)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, n: int):
        self.gamma = Parameter(np.ones(n, dtype=get_dtype()))
        self.beta = Parameter(np.zeros(n, dtype=get_dtype()))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta)
