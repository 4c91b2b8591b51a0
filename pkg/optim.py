from typing import Dict, Iterable, List

import numpy as np

from nn import Parameter


class AdamState:
    """Moment buffers and step counter of one Adam optimiser."""

    def __init__(self, lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.first_moment: Dict[str, np.ndarray] = {}
        self.second_moment: Dict[str, np.ndarray] = {}


def adam_step(params: Iterable[Parameter], state: AdamState) -> None:
    """One bias-corrected Adam update; parameters without a gradient are left alone."""
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for param in params:
        if param.grad is None:
            continue
        m = state.first_moment.setdefault(param.name, np.zeros_like(param.data))
        v = state.second_moment.setdefault(param.name, np.zeros_like(param.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * param.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * param.grad ** 2
        param.data -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 5e-4, **kwargs):
        self.params: List[Parameter] = list(params)
        self.state = AdamState(lr=lr, **kwargs)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def zero_grad(self) -> None:
        for param in self.params:
            param.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.state)


def step_decay_lr(base_lr: float, epoch: int, decay_every: int) -> float:
    """Learning rate for a 1-based epoch, divided by 10 every `decay_every` epochs."""
    if decay_every <= 0:
        return base_lr
    return base_lr / (10.0 ** ((epoch - 1) // decay_every))
