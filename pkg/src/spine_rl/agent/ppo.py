"""PPO objective, generalized advantage estimation and the update step."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch.distributions import Categorical


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    learning_rate: float = 3e-4
    rollout_length: int = 2048
    n_epochs: int = 4
    minibatch_size: int = 64
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    total_steps: int = 300_000
    n_envs: int = 8
    safety_epochs: int = 2
    safety_batch_size: int = 256
    safety_learning_rate: float = 1e-3
    checkpoint_every: int = 50_000
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.clip_ratio <= 0:
            raise ValueError("clip_ratio must be positive")
        if self.n_envs < 1 or self.rollout_length < self.n_envs:
            raise ValueError("rollout_length must cover at least one step per environment")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "PPOConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown ppo config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """Advantages and returns for arrays shaped (T, n_envs).

    ``dones[t]`` marks that the episode ended after step t; the value after a
    terminal step is taken as zero. ``last_values`` bootstraps the state
    following the final row.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    last_values = np.asarray(last_values, dtype=np.float64)
    T = len(rewards)
    adv = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0]) if T else 0.0
    for t in reversed(range(T)):
        next_v = last_values if t == T - 1 else values[t + 1]
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
    return adv, adv + values


def ppo_loss(net, obs, actions, old_logp, advantages, returns, clip_ratio=0.2, value_coef=0.5,
             entropy_coef=0.01):
    """Clipped surrogate + value MSE - entropy bonus; returns (total, stats)."""
    logits, values, _ = net(obs)
    dist = Categorical(logits=logits)
    logp = dist.log_prob(actions)
    log_ratio = logp - old_logp
    ratio = torch.exp(log_ratio)
    surr = torch.min(ratio * advantages, torch.clamp(ratio, 1 - clip_ratio, 1 + clip_ratio) * advantages)
    policy_loss = -surr.mean()
    value_loss = 0.5 * ((values - returns) ** 2).mean()
    entropy = dist.entropy().mean()
    total = policy_loss + value_coef * value_loss - entropy_coef * entropy
    with torch.no_grad():
        stats = {
            "policy_loss": float(policy_loss),
            "value_loss": float(value_loss),
            "entropy": float(entropy),
            "approx_kl": float(((ratio - 1) - log_ratio).mean()),
            "clip_fraction": float(((ratio - 1).abs() > clip_ratio).float().mean()),
        }
    return total, stats


@dataclass
class RolloutBuffer:
    """On-policy experience shaped (T, n_envs, ...)."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    l_safe: np.ndarray
    last_values: np.ndarray

    def __len__(self):
        return int(self.actions.size)

    @classmethod
    def empty(cls, T: int, n_envs: int, obs_shape) -> "RolloutBuffer":
        return cls(
            obs=np.zeros((T, n_envs, *obs_shape), dtype=np.uint8),
            actions=np.zeros((T, n_envs), dtype=np.int64),
            log_probs=np.zeros((T, n_envs)),
            values=np.zeros((T, n_envs)),
            rewards=np.zeros((T, n_envs)),
            dones=np.zeros((T, n_envs)),
            l_safe=np.zeros((T, n_envs)),
            last_values=np.zeros(n_envs),
        )


def ppo_update(net, optimizer, buffer: RolloutBuffer, cfg: PPOConfig, rng: np.random.Generator) -> dict:
    """Run ``cfg.n_epochs`` of minibatch PPO on one rollout and return mean statistics."""
    if len(buffer) == 0:
        raise ValueError("cannot update from an empty rollout buffer")
    adv, returns = compute_gae(buffer.rewards, buffer.values, buffer.dones, buffer.last_values,
                               cfg.gamma, cfg.gae_lambda)
    adv = adv.reshape(-1)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(buffer)
    obs = torch.as_tensor(buffer.obs.reshape(n, *buffer.obs.shape[2:]))
    actions = torch.as_tensor(buffer.actions.reshape(-1))
    old_logp = torch.as_tensor(buffer.log_probs.reshape(-1), dtype=torch.float32)
    adv_t = torch.as_tensor(adv, dtype=torch.float32)
    ret_t = torch.as_tensor(returns.reshape(-1), dtype=torch.float32)
    params = [p for g in optimizer.param_groups for p in g["params"]]
    totals, count = {}, 0
    for _ in range(cfg.n_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = torch.as_tensor(order[start:start + cfg.minibatch_size])
            loss, stats = ppo_loss(net, obs[idx], actions[idx], old_logp[idx], adv_t[idx], ret_t[idx],
                                   cfg.clip_ratio, cfg.value_coef, cfg.entropy_coef)
            optimizer.zero_grad()
            loss.backward()
            if cfg.max_grad_norm:
                torch.nn.utils.clip_grad_norm_(params, cfg.max_grad_norm)
            optimizer.step()
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            count += 1
    return {k: v / count for k, v in totals.items()}
