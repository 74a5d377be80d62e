"""Volumetric actor-critic with safe-distance heads."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

N_ACTIONS = 11

# observation labels {0: empty, 1: drill, 2: surface} -> network input
LABEL_VALUES = (0.0, 0.5, 1.0)

ACTIVATIONS = {"relu": nn.ReLU, "elu": nn.ELU, "tanh": nn.Tanh}


def _conv_out(n: int, k: int = 3, s: int = 2, p: int = 1) -> int:
    return (n + 2 * p - k) // s + 1


def _init_linear(layer: nn.Module, gain: float):
    nn.init.orthogonal_(layer.weight, gain)
    nn.init.zeros_(layer.bias)
    return layer


class VolumeEncoder(nn.Module):
    """Stride-2 3D convolutions followed by a linear embedding."""

    def __init__(self, grid_dims=(50, 50, 20), channels=(8, 16, 32), embed_dim=256, activation="relu"):
        super().__init__()
        act = ACTIVATIONS[activation]
        layers, c_in, dims = [], 1, list(grid_dims)
        for c_out in channels:
            layers += [nn.Conv3d(c_in, c_out, kernel_size=3, stride=2, padding=1), act()]
            c_in = c_out
            dims = [_conv_out(n) for n in dims]
        self.conv = nn.Sequential(*layers)
        self.flat_dim = c_in * int(np.prod(dims))
        self.fc = nn.Sequential(_init_linear(nn.Linear(self.flat_dim, embed_dim), np.sqrt(2)), act())
        self.register_buffer("lut", torch.tensor(LABEL_VALUES), persistent=False)
        self.grid_dims = tuple(grid_dims)
        self.embed_dim = embed_dim

    def encode_input(self, obs: torch.Tensor) -> torch.Tensor:
        if obs.dtype in (torch.uint8, torch.int64, torch.int32):
            obs = self.lut.to(torch.get_default_dtype())[obs.long()]
        if obs.dim() == 4:
            obs = obs.unsqueeze(1)
        return obs.to(self.fc[0].weight.dtype)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        x = self.conv(self.encode_input(obs))
        return self.fc(x.flatten(1))


def mlp_head(in_dim: int, hidden: int, out_dim: int, activation="relu", out_gain=1.0) -> nn.Sequential:
    act = ACTIVATIONS[activation]
    return nn.Sequential(
        _init_linear(nn.Linear(in_dim, hidden), np.sqrt(2)), act(),
        _init_linear(nn.Linear(hidden, out_dim), out_gain))


class ActorCritic(nn.Module):
    """Shared encoder feeding actor, critic and ``n_heads`` safe-distance heads.

    Safe-distance heads output distances normalized by ``horizon`` and see
    a detached embedding: only PPO shapes the encoder. ``forward_prior`` is
    the initial logit bias of the forward action.
    """

    def __init__(self, grid_dims=(50, 50, 20), channels=(8, 16, 32), embed_dim=256, hidden=128,
                 n_heads=5, horizon=150.0, activation="relu", n_actions=N_ACTIONS, forward_prior=0.0):
        super().__init__()
        self.encoder = VolumeEncoder(grid_dims, channels, embed_dim, activation)
        self.actor = mlp_head(embed_dim, hidden, n_actions, activation, out_gain=0.01)
        # optional initial preference for action 0 (forward) to seed exploration
        with torch.no_grad():
            self.actor[-1].bias[0] = forward_prior
        self.critic = mlp_head(embed_dim, hidden, 1, activation, out_gain=1.0)
        self.safety_heads = nn.ModuleList(
            [mlp_head(embed_dim, hidden, 1, activation, out_gain=1.0) for _ in range(n_heads)])
        self.horizon = float(horizon)

    def heads_from_embedding(self, emb: torch.Tensor) -> torch.Tensor:
        return torch.cat([h(emb) for h in self.safety_heads], dim=-1)

    def forward(self, obs: torch.Tensor):
        emb = self.encoder(obs)
        logits = self.actor(emb)
        value = self.critic(emb).squeeze(-1)
        safe = self.heads_from_embedding(emb.detach())
        return logits, value, safe * self.horizon
