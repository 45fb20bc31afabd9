"""Named parameter containers and the two optimizers used for training."""
from __future__ import annotations

import contextlib
from collections import OrderedDict
from typing import Iterator

import numpy as np

from .autodiff import ContractError, Tensor

ADAGRAD_EPS = 1e-8


class ParameterSet:
    """Ordered, uniquely named trainable tensors plus per-parameter optimizer slots."""

    def __init__(self, items=()):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        # slot kind -> name -> array
        self.slots: dict[str, dict[str, np.ndarray]] = {}
        for name, value in items:
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(np.asarray(value))
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, t.shape) for k, t in self._params.items()]

    def reset_slots(self) -> None:
        self.slots.clear()

    def slot(self, kind: str, name: str) -> np.ndarray:
        table = self.slots.setdefault(kind, {})
        if name not in table:
            table[name] = np.zeros_like(self._params[name].data)
        return table[name]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None


@contextlib.contextmanager
def frozen(params: ParameterSet):
    """Treat ``params`` as constants: no gradients are computed for them."""
    tensors = [t for _, t in params.items()]
    for t in tensors:
        t.requires_grad = False
    try:
        yield params
    finally:
        for t in tensors:
            t.requires_grad = True


def _grad_of(name: str, t: Tensor) -> np.ndarray:
    if t.grad is None:
        raise ContractError(f"parameter {name!r} has no gradient; run backward first")
    return t.grad


def sgd_momentum_step(params: ParameterSet, lr: float, momentum: float) -> ParameterSet:
    """Heavy-ball update: ``v = momentum * v + g``, ``w -= lr * v``."""
    if not lr > 0 or not 0 <= momentum < 1:
        raise ContractError(f"invalid SGD settings lr={lr}, momentum={momentum}")
    grads = [(name, t, _grad_of(name, t)) for name, t in params.items()]
    for name, t, g in grads:
        v = params.slot("velocity", name)
        v *= t.dtype.type(momentum)
        v += g
        t.data = t.data - t.dtype.type(lr) * v
    return params


def adagrad_step(params: ParameterSet, lr: float, epsilon: float = ADAGRAD_EPS) -> ParameterSet:
    """``acc += g**2``, ``w -= lr * g / (sqrt(acc) + eps)``."""
    if not lr > 0 or not epsilon > 0:
        raise ContractError(f"invalid Adagrad settings lr={lr}, eps={epsilon}")
    grads = [(name, t, _grad_of(name, t)) for name, t in params.items()]
    for name, t, g in grads:
        acc = params.slot("accumulator", name)
        acc += g * g
        t.data = t.data - t.dtype.type(lr) * g / (np.sqrt(acc) + t.dtype.type(epsilon))
    return params
