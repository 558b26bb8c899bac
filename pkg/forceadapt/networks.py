# forceadapt/networks.py
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
from torch.distributions import Normal

LOG_STD_MIN = -4.0
LOG_STD_MAX = 1.0


def mlp(in_dim: int, hidden: Sequence[int], out_dim: int, activation=nn.Tanh) -> nn.Sequential:
    layers: List[nn.Module] = []
    last = in_dim
    for width in hidden:
        layers += [nn.Linear(last, width), activation()]
        last = width
    layers.append(nn.Linear(last, out_dim))
    return nn.Sequential(*layers)


class GaussianActor(nn.Module):
    """Diagonal Gaussian policy with a state-independent, clamped log-std."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: Sequence[int], init_log_std: float = -0.7):
        super().__init__()
        self.body = mlp(obs_dim, hidden, act_dim)
        with torch.no_grad():
            self.body[-1].weight.mul_(0.01)
            self.body[-1].bias.zero_()
        self.log_std = nn.Parameter(torch.full((act_dim,), float(init_log_std)))

    @property
    def act_dim(self) -> int:
        return self.log_std.shape[0]

    def clamped_log_std(self) -> torch.Tensor:
        return self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)

    def noise_std(self) -> float:
        return float(self.clamped_log_std().exp().mean())

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return self.body(obs)

    def distribution(self, obs: torch.Tensor) -> Normal:
        mean = self.body(obs)
        return Normal(mean, self.clamped_log_std().exp().expand_as(mean))

    def evaluate(self, obs: torch.Tensor, actions: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """(log-prob, entropy) per row, summed over action dims."""
        dist = self.distribution(obs)
        return dist.log_prob(actions).sum(-1), dist.entropy().sum(-1)

    @torch.no_grad()
    def sample(self, obs: torch.Tensor, generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        mean = self.body(obs)
        std = self.clamped_log_std().exp().expand_as(mean)
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        actions = mean + std * noise
        return actions, Normal(mean, std).log_prob(actions).sum(-1)


class Critic(nn.Module):
    def __init__(self, obs_dim: int, hidden: Sequence[int]):
        super().__init__()
        self.body = mlp(obs_dim, hidden, 1)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return self.body(obs).squeeze(-1)
