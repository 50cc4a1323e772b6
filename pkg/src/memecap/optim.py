"""Plain gradient descent with momentum; the one optimizer every trainer uses."""

from __future__ import annotations

import numpy as np


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale the whole gradient dict so its global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    factor = max_norm / total
    return {k: g * factor for k, g in grads.items()}


class MomentumSGD:
    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float = 0.1,
        momentum: float = 0.9,
        clip_norm: float | None = None,
    ):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], direction: float = -1.0) -> None:
        """direction -1 descends (losses); +1 ascends (the RL objective)."""
        if self.clip_norm is not None:
            grads = clip_global_norm(grads, self.clip_norm)
        for name, grad in grads.items():
            vel = self.velocity[name]
            vel *= self.momentum
            vel += direction * self.lr * grad
            self.params[name] += vel
