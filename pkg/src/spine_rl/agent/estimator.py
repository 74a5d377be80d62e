"""Estimator-style facade over the actor-critic, PPO training and the safety ensemble."""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .._validation import check_observations
from ..env import DrillingEnv
from .checkpoint import CheckpointError, load_checkpoint, restore_model, restore_optimizer, save_checkpoint
from .ensemble import ensemble_stats
from .networks import ActorCritic
from .ppo import PPOConfig
from .trainer import train_loop

NETWORK_KEYS = ("grid_dims", "channels", "embed_dim", "hidden", "n_heads", "horizon", "activation", "forward_prior")


class SafePPOAgent(BaseEstimator):
    """PPO-trained drilling policy with a bootstrap safe-distance ensemble.

    ``fit`` consumes a list of :class:`~spine_rl.env.DrillingEnv`
    instances; ``predict`` maps observation grids to greedy actions and
    ``predict_safe_distance`` to the ensemble mean and standard deviation
    (mm). All constructor arguments are hyperparameters in the usual
    estimator sense, so ``get_params``/``set_params``/``clone`` work.
    """

    def __init__(self, grid_dims=(50, 50, 20), channels=(8, 16, 32), embed_dim=256, hidden=128, n_heads=5,
                 horizon=150.0, activation="relu", forward_prior=0.0, gamma=0.99, gae_lambda=0.95, clip_ratio=0.2,
                 learning_rate=3e-4, rollout_length=2048, n_epochs=4, minibatch_size=64, entropy_coef=0.01,
                 value_coef=0.5, max_grad_norm=0.5, total_steps=300_000, n_envs=8, safety_epochs=2,
                 safety_batch_size=256, safety_learning_rate=1e-3, checkpoint_every=50_000, random_state=0):
        self.grid_dims = grid_dims
        self.channels = channels
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.n_heads = n_heads
        self.horizon = horizon
        self.activation = activation
        self.forward_prior = forward_prior
        self.gamma = gamma
        self.gae_lambda = gae_lambda
        self.clip_ratio = clip_ratio
        self.learning_rate = learning_rate
        self.rollout_length = rollout_length
        self.n_epochs = n_epochs
        self.minibatch_size = minibatch_size
        self.entropy_coef = entropy_coef
        self.value_coef = value_coef
        self.max_grad_norm = max_grad_norm
        self.total_steps = total_steps
        self.n_envs = n_envs
        self.safety_epochs = safety_epochs
        self.safety_batch_size = safety_batch_size
        self.safety_learning_rate = safety_learning_rate
        self.checkpoint_every = checkpoint_every
        self.random_state = random_state

    # -- construction ------------------------------------------------------
    def ppo_config(self) -> PPOConfig:
        names = {f.name for f in fields(PPOConfig)} - {"seed"}
        return PPOConfig(seed=self.random_state, **{k: getattr(self, k) for k in names})

    def network_config(self) -> dict:
        cfg = {k: getattr(self, k) for k in NETWORK_KEYS}
        cfg["grid_dims"] = list(cfg["grid_dims"])
        cfg["channels"] = list(cfg["channels"])
        return cfg

    def _build(self):
        torch.manual_seed(self.random_state)
        net = ActorCritic(tuple(self.grid_dims), tuple(self.channels), self.embed_dim, self.hidden,
                          self.n_heads, self.horizon, self.activation, forward_prior=self.forward_prior)
        ppo_params = (list(net.encoder.parameters()) + list(net.actor.parameters())
                      + list(net.critic.parameters()))
        optimizers = {"ppo": torch.optim.Adam(ppo_params, lr=self.learning_rate, eps=1e-5)}
        for i, head in enumerate(net.safety_heads):
            optimizers[f"safety{i}"] = torch.optim.Adam(head.parameters(), lr=self.safety_learning_rate)
        return net, optimizers

    def initialize(self):
        """Create fresh (untrained) parameters without running any training."""
        self.net_, self.optimizers_ = self._build()
        self.step_ = 0
        return self

    def config_snapshot(self) -> dict:
        return {"network": self.network_config(), "params": _jsonable(self.get_params())}

    # -- training ----------------------------------------------------------
    def iter_fit(self, envs, out_dir=None, resume=False):
        """Generator form of :meth:`fit` yielding every emitted checkpoint."""
        if isinstance(envs, DrillingEnv):
            envs = [envs]
        if not envs:
            raise ValueError("fit needs at least one environment")
        for env in envs:
            if tuple(env.observation_shape) != tuple(self.grid_dims):
                raise ValueError(f"environment grid {env.observation_shape} does not match {tuple(self.grid_dims)}")
        if not (resume and hasattr(self, "net_")):
            self.initialize()
        for ckpt in train_loop(envs, self.ppo_config(), self.net_, self.optimizers_, self.config_snapshot(),
                               start_step=self.step_, out_dir=out_dir):
            self.step_ = ckpt.step
            yield ckpt
        self.net_.eval()

    def fit(self, envs, out_dir=None, resume=False, on_checkpoint=None):
        for ckpt in self.iter_fit(envs, out_dir, resume):
            if on_checkpoint is not None:
                on_checkpoint(ckpt)
        return self

    # -- inference ---------------------------------------------------------
    def _forward(self, obs):
        check_is_fitted(self, "net_")
        obs = check_observations(obs, self.grid_dims)
        with torch.no_grad():
            logits, value, safe = self.net_(torch.as_tensor(obs))
        return logits, value, safe

    def forward(self, obs):
        """Raw outputs for a batch: (logits[B, 11], value[B], safe distances[B, n_heads])."""
        logits, value, safe = self._forward(obs)
        return logits.numpy(), value.numpy(), safe.numpy()

    def predict_proba(self, obs) -> np.ndarray:
        return torch.softmax(self._forward(obs)[0], dim=-1).numpy()

    def predict(self, obs) -> np.ndarray:
        return self._forward(obs)[0].argmax(dim=-1).numpy()

    def predict_safe_distance(self, obs) -> tuple[np.ndarray, np.ndarray]:
        return ensemble_stats(self._forward(obs)[2].double().numpy())

    def propose(self, obs) -> tuple[int, float, float]:
        """Greedy action plus ensemble mean and STD for a single observation."""
        logits, _, safe = self._forward(obs[None])
        mean, std = ensemble_stats(safe.double().numpy())
        return int(logits[0].argmax()), float(mean[0]), float(std[0])

    # -- persistence -------------------------------------------------------
    def save(self, path):
        from .checkpoint import snapshot

        check_is_fitted(self, "net_")
        return save_checkpoint(snapshot(self.net_, self.optimizers_, self.step_, self.config_snapshot()), path)

    @classmethod
    def from_checkpoint(cls, ckpt, expected_grid_dims=None) -> "SafePPOAgent":
        if not isinstance(ckpt, (str, Path)):
            obj = ckpt
        else:
            obj = load_checkpoint(ckpt, expected_grid_dims)
        params = dict(obj.config["params"])
        for key in ("grid_dims", "channels"):
            params[key] = tuple(params[key])
        agent = cls(**params)
        if expected_grid_dims is not None and tuple(agent.grid_dims) != tuple(expected_grid_dims):
            raise CheckpointError("dimension mismatch between checkpoint and requested grid")
        agent.initialize()
        restore_model(agent.net_, obj)
        for name, opt in agent.optimizers_.items():
            restore_optimizer(name, opt, obj)
        agent.step_ = obj.step
        agent.net_.eval()
        return agent


def _jsonable(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out
