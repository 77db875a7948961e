"""Adam and the step-decay / warmup learning-rate schedule."""

from typing import Dict

import numpy as np

from model.diffcore import Value


class Adam:
    """Adam over named parameters; moments are kept per parameter name."""

    def __init__(self, params: Dict[str, Value], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def learning_rate_at(tc, epoch: int, step: int, total_steps: int) -> float:
    """
    Learning rate for a 1-based epoch and 0-based global step.

    The base rate drops by decay_factor once epoch exceeds the decay epoch;
    with warmup_fraction > 0 it ramps linearly over that share of all steps.
    """
    lr = tc.learning_rate
    if epoch > tc.effective_decay_epoch:
        lr *= tc.decay_factor
    warmup_steps = int(round(tc.warmup_fraction * total_steps))
    if warmup_steps > 0 and step < warmup_steps:
        lr *= (step + 1) / warmup_steps
    return lr
