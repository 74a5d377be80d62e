"""Deployment-time distance-based safety filter."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .env import N_ACTIONS, Action, DrillingEnv, Region


@dataclass(frozen=True)
class ShieldConfig:
    """Pessimism ``lam`` on the ensemble STD and margin ``tau`` (mm).

    With ``oracle_mode`` the simulator's exact safe distance replaces the
    ensemble (STD 0).
    """

    lam: float = 1.0
    tau: float = 0.0
    oracle_mode: bool = False

    def __post_init__(self):
        if self.lam < 0 or self.tau < 0:
            raise ValueError("lambda and tau must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "ShieldConfig":
        unknown = set(d) - {"lambda", "tau_mm", "oracle_mode"}
        if unknown:
            raise ValueError(f"unknown shield keys: {sorted(unknown)}")
        return cls(float(d.get("lambda", 1.0)), float(d.get("tau_mm", 0.0)), bool(d.get("oracle_mode", False)))

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "tau_mm": self.tau, "oracle_mode": self.oracle_mode}


def shield_triggers(mean: float, std: float, cfg: ShieldConfig) -> bool:
    return mean - cfg.lam * std < cfg.tau


def filter_action(proposed: int, mean: float, std: float, cfg: ShieldConfig) -> int:
    """Force ``BACKWARD`` when the pessimistic distance ``mean - lam*std`` drops below ``tau``."""
    if not math.isfinite(mean) or std < 0 or not math.isfinite(std):
        raise ValueError(f"shield needs finite mean and non-negative std, got {mean}, {std}")
    return int(Action.BACKWARD) if shield_triggers(mean, std, cfg) else int(proposed)


class Policy(Protocol):
    def propose(self, obs) -> tuple[int, float, float]:
        """Return (action, ensemble mean, ensemble STD)."""


class RandomPolicy:
    """Uniform random actions; reports no safe-distance estimate."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def for_episode(self, seed: int) -> "RandomPolicy":
        return RandomPolicy(seed)

    def propose(self, obs):
        return int(self.rng.integers(N_ACTIONS)), math.nan, math.nan


class ConstantPolicy:
    """Always proposes the same action with a fixed (mean, std) estimate."""

    def __init__(self, action: int, mean: float = 1e3, std: float = 0.0):
        self.action = int(action)
        self.mean = mean
        self.std = std

    def propose(self, obs):
        return self.action, self.mean, self.std


@dataclass
class TrajectoryRecord:
    steps: list = field(default_factory=list)
    side: str = "right"
    anatomy: str = ""
    seed: int = 0
    final_axis: np.ndarray | None = None
    final_tip: np.ndarray | None = None
    entry_tip: np.ndarray | None = None
    bone_depth: float = 0.0
    damage_length: float = 0.0
    reached_target: bool = False
    ideal_depth: float = 0.0
    ideal_damage: float = 0.0

    @property
    def costs(self) -> list[int]:
        return [s["cost"] for s in self.steps]

    @property
    def safe(self) -> bool:
        return not any(self.costs)

    @property
    def shield_steps(self) -> list[int]:
        return [s["t"] for s in self.steps if s["shield"]]


def shielded_rollout(policy, env: DrillingEnv, cfg: ShieldConfig | None = None, seed: int = 0,
                     anatomy: int | None = None, side: str | None = None) -> TrajectoryRecord:
    """Run one episode; ``cfg=None`` disables the filter but still logs proposals."""
    if hasattr(policy, "for_episode"):
        policy = policy.for_episode(seed)
    obs = env.reset(seed=seed, anatomy=anatomy, side=side)
    rec = TrajectoryRecord(side=env.side, anatomy=env.anatomy.name, seed=seed, ideal_depth=env.ideal_depth,
                           ideal_damage=env.anatomy.ideal[env.side][1])
    while env.active:
        proposed, mean, std = policy.propose(obs)
        if cfg is not None and cfg.oracle_mode:
            mean, std = env.ground_truth_safe_distance(), 0.0
        executed = proposed if cfg is None else filter_action(proposed, mean, std, cfg)
        out = env.step(executed)
        shielded = executed != proposed or (cfg is not None and shield_triggers(mean, std, cfg))
        rec.steps.append(env.step_record(
            executed, out, proposed=int(proposed), executed=int(executed), shield=bool(shielded),
            reason="shield" if shielded else "policy", m_hat=_num(mean), sigma=_num(std),
            bone_depth=out.bone_depth, damage_length=out.damage_length, done=out.done,
            reached_target=out.reached_target))
        if rec.entry_tip is None and out.region == Region.CANCELLOUS:
            rec.entry_tip = env.pose.tip.copy()
        obs = out.observation
    rec.final_axis = env.pose.forward.copy()
    rec.final_tip = env.pose.tip.copy()
    rec.bone_depth = env.bone_depth
    rec.damage_length = env.damage_length
    rec.reached_target = bool(rec.steps and rec.steps[-1]["reached_target"])
    return rec


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else None
