"""Parameters and the Adam update."""

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class Parameter:
    """A named trainable tensor plus its Adam state."""

    __slots__ = ("name", "tensor", "m", "v", "steps")

    def __init__(self, name, data):
        self.name = name
        self.tensor = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)
        self.steps = 0

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam step over all parameters.

    Every parameter must carry a gradient; gradients are cleared afterwards
    so the next backward pass starts fresh.
    """
    for p in params:
        if p.tensor.grad is None:
            raise ContractError(f"parameter {p.name!r} has no gradient; run backward first")
    for p in params:
        g = p.tensor.grad
        p.steps += 1
        p.m += (1.0 - beta1) * (g - p.m)
        p.v += (1.0 - beta2) * (g * g - p.v)
        m_hat = p.m / (1.0 - beta1 ** p.steps)
        v_hat = p.v / (1.0 - beta2 ** p.steps)
        p.tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.tensor.grad = None
