"""He initialization and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np


def he_init(shape, fan_in: int, seed: Union[int, np.random.Generator]) -> np.ndarray:
    """Draw from N(0, 2 / fan_in)."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence, grads: Sequence[np.ndarray], st: AdamState) -> AdamState:
    """Bias-corrected Adam update, in place on ``params`` (Tensors or arrays)."""
    if not st.m:
        st.m = [np.zeros_like(_arr(p)) for p in params]
        st.v = [np.zeros_like(_arr(p)) for p in params]
    if len(st.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    st.t += 1
    c1 = 1.0 - st.beta1**st.t
    c2 = 1.0 - st.beta2**st.t
    for p, g, m, v in zip(params, grads, st.m, st.v):
        if g is None:
            continue
        arr = _arr(p)
        if g.shape != arr.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {arr.shape}")
        m *= st.beta1
        m += (1 - st.beta1) * g
        v *= st.beta2
        v += (1 - st.beta2) * (g * g)
        step = st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
        arr -= step.astype(arr.dtype)
    return st


def _arr(p) -> np.ndarray:
    return p.data if hasattr(p, "data") and isinstance(p.data, np.ndarray) else p


class Adam:
    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
        self.params = list(params)
        self.state = AdamState(lr, beta1, beta2, eps)

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
