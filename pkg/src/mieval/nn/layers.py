"""Parameterized layers built on :mod:`mieval.nn.functional`."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from mieval.nn import functional as F
from mieval.nn.optim import he_init
from mieval.nn.tensor import Tensor


class Module:
    """Minimal container: parameters, buffers and child modules by name."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = value
        return value

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True):
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())
        state.update((k, b.copy()) for k, b in self.named_buffers())
        return state

    def load_state_dict(self, state) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for k, p in params.items():
            if state[k].shape != p.data.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.data.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)
        for k, b in buffers.items():
            # buffers are updated in place by batch norm; keep identity
            b[...] = state[k]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.weight = self.add_param("weight", he_init((cout, cin, k, k), cin * k * k, rng).astype(dtype))
        self.bias = self.add_param("bias", np.zeros(cout, dtype=dtype))

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias)


class UpConv2d(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        # every output pixel receives exactly one tap per input channel
        self.weight = self.add_param("weight", he_init((cin, cout, 2, 2), cin, rng).astype(dtype))
        self.bias = self.add_param("bias", np.zeros(cout, dtype=dtype))

    def forward(self, x):
        return F.upconv2(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, c: int, dtype=np.float32, momentum: float = F.BN_MOMENTUM, eps: float = F.BN_EPS):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(c, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(c, dtype=dtype))
        self.running_mean = self.add_buffer("running_mean", np.zeros(c, dtype=dtype))
        self.running_var = self.add_buffer("running_var", np.ones(c, dtype=dtype))

    def forward(self, x):
        return F.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


def se_hidden_width(c: int, ratio: int = 16) -> int:
    return max(c // ratio, 2)


class SEBlock(Module):
    def __init__(self, c: int, rng: np.random.Generator, ratio: int = 16, dtype=np.float32):
        super().__init__()
        h = se_hidden_width(c, ratio)
        self.w1 = self.add_param("w1", he_init((c, h), c, rng).astype(dtype))
        self.b1 = self.add_param("b1", np.zeros(h, dtype=dtype))
        self.w2 = self.add_param("w2", he_init((h, c), h, rng).astype(dtype))
        self.b2 = self.add_param("b2", np.zeros(c, dtype=dtype))

    def forward(self, x):
        return F.se_block(x, self.w1, self.b1, self.w2, self.b2)


class ConvUnit(Module):
    """3x3 conv -> ELU -> batch norm -> squeeze-and-excitation."""

    def __init__(self, cin: int, cout: int, rng, dtype=np.float32, se_ratio: int = 16):
        super().__init__()
        self.conv = self.add_child("conv", Conv2d(cin, cout, 3, rng, dtype))
        self.bn = self.add_child("bn", BatchNorm2d(cout, dtype))
        self.se = self.add_child("se", SEBlock(cout, rng, se_ratio, dtype))

    def forward(self, x):
        return self.se(self.bn(F.elu(self.conv(x))))


class ConvBlock(Module):
    def __init__(self, cin: int, cout: int, rng, n_units: int = 2, dtype=np.float32, se_ratio: int = 16):
        super().__init__()
        self.units = [
            self.add_child(f"unit{i}", ConvUnit(cin if i == 0 else cout, cout, rng, dtype, se_ratio))
            for i in range(n_units)
        ]

    def forward(self, x):
        for u in self.units:
            x = u(x)
        return x
