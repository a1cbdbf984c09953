from dataclasses import dataclass, field

import numpy as np

from facefit.constants import ADAM_BETA_1, ADAM_BETA_2, ADAM_EPSILON
from facefit.errors import ContractViolation
from facefit.tensor import Array, Tensor


@dataclass(kw_only=True)
class Moments:
    first: Array
    second: Array

    @classmethod
    def like(cls, value: Array) -> "Moments":
        return cls(first=np.zeros_like(value), second=np.zeros_like(value))


def adam_step(param: Array, grad: Array, moments: Moments, lr: float, t: int) -> tuple[Array, Moments]:
    """One bias-corrected Adam update; returns new arrays and leaves the inputs untouched."""
    if t < 1:
        msg = f"Adam step index must be at least 1, got {t}"
        raise ContractViolation(msg)
    first = ADAM_BETA_1 * moments.first + (1.0 - ADAM_BETA_1) * grad
    second = ADAM_BETA_2 * moments.second + (1.0 - ADAM_BETA_2) * grad * grad
    step_size = lr / (1.0 - ADAM_BETA_1**t)
    denominator = np.sqrt(second / (1.0 - ADAM_BETA_2**t)) + ADAM_EPSILON
    return param - step_size * first / denominator, Moments(first=first, second=second)


@dataclass(kw_only=True)
class Adam:
    """Adam over named leaf tensors, updated in place from their accumulated gradients, each optionally rescaled by `scales`."""

    params: dict[str, Tensor]
    lr: float
    scales: dict[str, float] = field(default_factory=dict)
    t: int = 0
    moments: dict[str, Moments] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr <= 0.0:
            msg = f"learning rate must be positive, got {self.lr}"
            raise ContractViolation(msg)
        for name, param in self.params.items():
            if not param.is_leaf or not param.requires_grad:
                msg = f"parameter {name!r} must be a leaf tensor that requires grad"
                raise ContractViolation(msg)
            self.moments[name] = Moments.like(param.data)
        unknown = sorted(set(self.scales) - set(self.params))
        if unknown:
            msg = f"gradient scales name unknown parameters: {', '.join(unknown)}"
            raise ContractViolation(msg)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def step(self) -> None:
        self.t += 1
        for name, param in self.params.items():
            param.data, self.moments[name] = adam_step(param.data, self.scales.get(name, 1.0) * param.grad, self.moments[name], self.lr, self.t)
