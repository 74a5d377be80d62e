"""Rollout collection and the PPO / safety-head training loop."""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from ..env import DrillingEnv
from .checkpoint import Checkpoint, snapshot
from .ensemble import fit_heads
from .ppo import PPOConfig, RolloutBuffer, ppo_update

log = logging.getLogger(__name__)

CURVE_COLUMNS = ["step", "mean_reward", "mean_bone_depth_mm", "mean_cost", "safe_rate", "safety_head_mse"]


def sample_actions(logits: torch.Tensor, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw one action per row by inverse-CDF sampling; returns actions and log-probs."""
    logp = torch.log_softmax(logits, dim=-1).double().numpy()
    probs = np.exp(logp)
    u = rng.random(len(probs))[:, None]
    actions = np.minimum((np.cumsum(probs, axis=1) < u).sum(axis=1), probs.shape[1] - 1)
    return actions, logp[np.arange(len(actions)), actions]


class _EpisodeTracker:
    def __init__(self, n):
        self.reward = np.zeros(n)
        self.cost = np.zeros(n)
        self.finished = []

    def update(self, i, out):
        self.reward[i] += out.reward
        self.cost[i] += out.cost
        if out.done:
            self.finished.append((self.reward[i], out.bone_depth, self.cost[i]))
            self.reward[i] = 0.0
            self.cost[i] = 0.0

    def pop(self):
        done, self.finished = self.finished, []
        return done


def _embed(net, obs: np.ndarray, batch: int = 256) -> torch.Tensor:
    out = []
    with torch.no_grad():
        for start in range(0, len(obs), batch):
            out.append(net.encoder(torch.as_tensor(obs[start:start + batch])))
    return torch.cat(out)


def train_loop(
    envs: Sequence[DrillingEnv],
    cfg: PPOConfig,
    net,
    optimizers: dict,
    config_snapshot: dict,
    start_step: int = 0,
    out_dir=None,
) -> Iterator[Checkpoint]:
    """Alternate rollouts (no shield), PPO updates and safety-head fits.

    Yields a checkpoint at ``start_step`` and then every
    ``cfg.checkpoint_every`` steps plus one at the end. With ``out_dir`` the
    learning curve is appended to ``learning_curve.csv`` after every update.
    """
    if not envs:
        raise ValueError("train_loop needs at least one environment")
    n_envs = len(envs)
    horizon = net.horizon
    rng = np.random.default_rng([cfg.seed, 1])
    torch.manual_seed(cfg.seed)
    T = cfg.rollout_length // n_envs
    obs = np.stack([env.reset(seed=cfg.seed * 100_003 + i) for i, env in enumerate(envs)])
    tracker = _EpisodeTracker(n_envs)
    curve = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "learning_curve.csv"
        fresh = start_step == 0 or not path.exists()
        curve = open(path, "w" if fresh else "a", newline="")
        writer = csv.writer(curve)
        if fresh:
            writer.writerow(CURVE_COLUMNS)
    step = start_step
    next_ckpt = step + cfg.checkpoint_every
    yield snapshot(net, optimizers, step, config_snapshot)
    try:
        while step < cfg.total_steps:
            buf = RolloutBuffer.empty(T, n_envs, envs[0].observation_shape)
            net.eval()
            for t in range(T):
                with torch.no_grad():
                    logits, values, _ = net(torch.as_tensor(obs))
                actions, logp = sample_actions(logits, rng)
                buf.obs[t] = obs
                buf.actions[t] = actions
                buf.log_probs[t] = logp
                buf.values[t] = values.numpy()
                for i, env in enumerate(envs):
                    out = env.step(actions[i])
                    buf.rewards[t, i] = out.reward
                    buf.l_safe[t, i] = out.l_safe
                    tracker.update(i, out)
                    if out.done:
                        buf.dones[t, i] = 1.0
                        if not out.reached_target:
                            # time-limit truncation: bootstrap from the final state
                            with torch.no_grad():
                                v_last = net(torch.as_tensor(out.observation[None]))[1]
                            buf.rewards[t, i] += cfg.gamma * float(v_last)
                        obs[i] = env.reset()
                    else:
                        obs[i] = out.observation
            with torch.no_grad():
                buf.last_values = net(torch.as_tensor(obs))[1].numpy()
            step += T * n_envs
            net.train()
            stats = ppo_update(net, optimizers["ppo"], buf, cfg, rng)
            n = len(buf)
            emb = _embed(net, buf.obs.reshape(n, *buf.obs.shape[2:]))
            targets = torch.as_tensor(buf.l_safe.reshape(-1) / horizon, dtype=torch.float32)
            head_opts = [optimizers[f"safety{i}"] for i in range(len(net.safety_heads))]
            mses = fit_heads(net.safety_heads, emb, targets, epochs=cfg.safety_epochs,
                             batch_size=cfg.safety_batch_size, rng=rng, optimizers=head_opts)
            episodes = tracker.pop()
            if episodes:
                ep = np.array(episodes)
                row = [step, ep[:, 0].mean(), ep[:, 1].mean(), ep[:, 2].mean(),
                       100.0 * np.mean(ep[:, 2] == 0), float(np.mean(mses)) * horizon**2]
            else:
                row = [step, np.nan, np.nan, np.nan, np.nan, float(np.mean(mses)) * horizon**2]
            log.info("step %d reward %.3f depth %.2f cost %.2f safe %.1f%% mse %.2f kl %.4f", *row, stats["approx_kl"])
            if curve is not None:
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
                curve.flush()
            if step >= next_ckpt or step >= cfg.total_steps:
                next_ckpt = step + cfg.checkpoint_every
                yield snapshot(net, optimizers, step, config_snapshot, {"train_stats": stats})
    finally:
        if curve is not None:
            curve.close()
