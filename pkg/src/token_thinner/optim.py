"""Adam with a linear warm-up / linear decay learning-rate schedule, and the
single-batch training step."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .exceptions import DataError, ParameterError
from .model import Model
from .tensor import Tensor


class LinearWarmupSchedule:
    """Ramp linearly from zero to the base rate, then decay linearly to zero
    at the final step."""

    def __init__(self, base_lr: float, total_steps: int, warmup_fraction: float = 0.1):
        if base_lr < 0:
            raise ParameterError(f"base learning rate must be non-negative, got {base_lr}")
        if total_steps < 1:
            raise ParameterError(f"total_steps must be at least 1, got {total_steps}")
        if not 0.0 <= warmup_fraction < 1.0:
            raise ParameterError(f"warmup_fraction must lie in [0, 1), got {warmup_fraction}")
        self.base_lr = base_lr
        self.total_steps = total_steps
        self.warmup_steps = max(int(round(total_steps * warmup_fraction)), 1)

    def lr(self, step: int) -> float:
        """Learning rate for 1-based step `step`."""
        if step <= self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        remaining = max(self.total_steps - step, 0)
        span = max(self.total_steps - self.warmup_steps, 1)
        return self.base_lr * remaining / span


class Adam:
    def __init__(
        self,
        params: dict[str, Tensor],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        correct1 = 1.0 - self.beta1**self.t
        correct2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - lr * (m / correct1) / (np.sqrt(v / correct2) + self.eps)


def batch_loss(model: Model, batch: Sequence[tuple[Sequence[int], int]], train_mode: bool) -> Tensor:
    """Mean cross entropy of the batch; labels are validated up front."""
    if not batch:
        raise DataError("empty batch")
    for _, label in batch:
        if not 0 <= int(label) < model.config.n_classes:
            raise DataError(
                f"label {label} out of range for {model.config.n_classes} classes"
            )
    losses = [
        T.cross_entropy_with_logits(model.forward(ids, train_mode=train_mode), int(label))
        for ids, label in batch
    ]
    total = losses[0]
    for extra in losses[1:]:
        total = T.add(total, extra)
    return T.scale(total, 1.0 / len(losses))


def train_step(
    model: Model,
    batch: Sequence[tuple[Sequence[int], int]],
    optimizer: Adam,
    lr: float,
) -> float:
    """One gradient step on a batch; returns the batch loss."""
    optimizer.zero_grad()
    loss = batch_loss(model, batch, train_mode=True)
    loss.backward()
    optimizer.step(lr)
    model.step += 1
    return loss.item()
