"""Adam with bias correction and linear warmup."""

import logging
from typing import Dict, List, Sequence

import numpy as np

from .tensor import Parameter

log = logging.getLogger("ipt-lab")


class Adam:
    """Adaptive-moment optimizer over a list of named parameters.

    Frozen parameters may be passed in; they are skipped on every step, so
    their values stay bit-identical even if a gradient was written to them.
    The effective learning rate at step ``s`` (1-based) is
    ``lr * min(1, s / warmup_steps)``.

    ``lr = 0`` is accepted and makes every step a no-op on the values, so a
    zero-rate training run leaves its parameters unchanged. Negative rates
    raise ``ValueError``.
    """

    def __init__(self, params: Sequence[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, warmup_steps: int = 0):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        if warmup_steps < 0:
            raise ValueError(f"warmup_steps must be >= 0, got {warmup_steps}")
        self.params: List[Parameter] = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.warmup_steps = warmup_steps
        self.step_count = 0
        self.m: Dict[int, np.ndarray] = {}
        self.v: Dict[int, np.ndarray] = {}

    def current_lr(self) -> float:
        if self.warmup_steps and self.step_count <= self.warmup_steps:
            return self.lr * self.step_count / self.warmup_steps
        return self.lr

    def step(self) -> None:
        self.step_count += 1
        lr = self.current_lr()
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for i, p in enumerate(self.params):
            g = p.tensor.grad
            if p.frozen or g is None:
                continue
            m = self.m.get(i)
            v = self.v.get(i)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self.m[i], self.v[i] = m, v
            p.tensor.data = p.tensor.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        log.debug(f"adam step {self.step_count} lr={lr:.3g}")

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None

    def state(self) -> Dict[str, object]:
        return {"step": self.step_count,
                "m": {self.params[i].name: m for i, m in self.m.items()},
                "v": {self.params[i].name: v for i, v in self.v.items()}}


def adam_step(optimizer: Adam) -> None:
    """Apply one optimizer update from the currently populated gradients."""
    optimizer.step()
