"""Named parameter groups and the Adam optimizer."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class ParameterGroup:
    """Ordered name -> Tensor map with per-tensor freeze flags."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        tensor.name = name
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def trainable(self):
        return [(n, t) for n, t in self._params.items() if t.live]

    def freeze_all(self) -> None:
        for t in self._params.values():
            t.frozen = True

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n, t in self._params.items():
            src = arrays[n]
            if src.shape != t.data.shape:
                raise ContractError(f"shape mismatch loading {n!r}: {src.shape} != {t.data.shape}")
            t.data = src.astype(t.data.dtype, copy=True)


class Adam:
    """Bias-corrected Adam over the live parameters of a group.

    Frozen parameters are never touched. Every live parameter must carry a
    gradient when step() runs; grads are cleared afterwards.
    """

    def __init__(self, params: ParameterGroup, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.trainable():
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient at step {self.t}")
            g = p.grad
            m = self._m.setdefault(name, np.zeros_like(p.data))
            v = self._v.setdefault(name, np.zeros_like(p.data))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
        self.params.zero_grad()
