# forceadapt/estimator.py
import logging
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .networks import mlp

logger = logging.getLogger(__name__)


class ForceEstimator(nn.Module):
    """Regresses both EE forces from proprioception (no privileged input)."""

    def __init__(self, in_dim: int, num_arms: int = 2, hidden: Sequence[int] = (256, 128), force_scale: float = 0.02):
        super().__init__()
        self.in_dim = in_dim
        self.num_arms = num_arms
        self.force_scale = force_scale
        self.body = mlp(in_dim, hidden, 3 * num_arms)

    def forward(self, proprio: torch.Tensor) -> torch.Tensor:
        """Scaled force prediction (B, 3 * arms)."""
        return self.body(proprio)

    @torch.no_grad()
    def predict(self, proprio: np.ndarray) -> np.ndarray:
        out = self.body(torch.as_tensor(proprio, dtype=torch.float32)).double().numpy() / self.force_scale
        return out.reshape(out.shape[0], self.num_arms, 3)


def train_force_estimator(
    estimator: ForceEstimator,
    optimizer: torch.optim.Optimizer,
    inputs: np.ndarray,
    forces: np.ndarray,
    epochs: int = 2,
    minibatches: int = 4,
    generator: Optional[torch.Generator] = None,
) -> float:
    """Supervised MSE regression on (proprio, applied force) pairs. Returns the last-epoch MSE in N^2."""
    x = torch.as_tensor(inputs, dtype=torch.float32).reshape(-1, estimator.in_dim)
    y = torch.as_tensor(forces, dtype=torch.float32).reshape(x.shape[0], -1) * estimator.force_scale
    n = x.shape[0]
    size = max(1, n // minibatches)
    last = 0.0
    for _ in range(epochs):
        perm = torch.randperm(n, generator=generator)
        total, count = 0.0, 0
        for start in range(0, n, size):
            idx = perm[start:start + size]
            loss = torch.mean((estimator(x[idx]) - y[idx]) ** 2)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss) * len(idx)
            count += len(idx)
        last = total / max(count, 1) / estimator.force_scale**2
    logger.debug("force estimator mse %.4f N^2 over %d samples", last, n)
    return last
