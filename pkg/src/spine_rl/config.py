"""Run configuration shared by the command-line subcommands."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .env import EpisodeConfig
from .phantom import PhantomParams, params_from_dict, params_to_dict
from .shield import ShieldConfig


class ConfigError(ValueError):
    pass


EVAL_KEYS = {"protocol", "n_episodes", "subject", "with_shield", "without_shield"}
ROLLOUT_KEYS = {"n_episodes"}
PHANTOM_EXTRA_KEYS = {"level", "subject", "scale"}


@dataclass
class RunConfig:
    """Fully resolved configuration of one CLI invocation.

    ``phantoms`` lists volume header files (training and evaluation
    anatomies); ``agent`` holds estimator hyperparameters and ``paths`` the
    output directory, checkpoint to load and checkpoint to resume from.
    """

    seed: int = 0
    parallel: int = 1
    phantom: dict = field(default_factory=dict)
    phantoms: list = field(default_factory=list)
    env: dict = field(default_factory=dict)
    agent: dict = field(default_factory=dict)
    shield: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    rollout: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(raw)

    def validate(self):
        from .agent import SafePPOAgent

        try:
            self.phantom_params()
            self.env_config()
            self.shield_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        bad = set(self.agent) - set(SafePPOAgent().get_params()) - {"random_state"}
        if bad:
            raise ConfigError(f"unknown agent keys: {sorted(bad)}")
        for name, allowed, section in (("eval", EVAL_KEYS, self.eval), ("rollout", ROLLOUT_KEYS, self.rollout),
                                       ("paths", {"out", "checkpoint", "resume"}, self.paths)):
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"unknown {name} keys: {sorted(bad)}")
        if self.eval.get("protocol", "individual") not in ("individual", "cross_validation"):
            raise ConfigError(f"unknown protocol {self.eval['protocol']!r}")
        if int(self.parallel) < 1:
            raise ConfigError("parallel must be >= 1")

    def phantom_params(self) -> PhantomParams:
        d = {k: v for k, v in self.phantom.items() if k not in PHANTOM_EXTRA_KEYS}
        if "level" in self.phantom:
            from .phantom import level_params

            return level_params(int(self.phantom["level"]), int(self.phantom.get("subject", 0)), **d)
        return params_from_dict(d)

    def env_config(self) -> EpisodeConfig:
        d = dict(self.env)
        d.setdefault("seed", self.seed)
        return EpisodeConfig.from_dict(d)

    def shield_config(self) -> ShieldConfig:
        return ShieldConfig.from_dict(self.shield)

    def resolved(self) -> dict:
        """Every setting with defaults filled in, as logged by the CLI."""
        from .agent import SafePPOAgent

        agent = SafePPOAgent(**{"random_state": self.seed, **self.agent}).get_params()
        phantom = params_to_dict(self.phantom_params())
        if "scale" in self.phantom:
            phantom["scale"] = self.phantom["scale"]
        return {
            "seed": self.seed,
            "parallel": self.parallel,
            "phantom": phantom,
            "phantoms": list(self.phantoms),
            "env": self.env_config().to_dict(),
            "agent": {k: list(v) if isinstance(v, tuple) else v for k, v in agent.items()},
            "shield": self.shield_config().to_dict(),
            "eval": {"protocol": "individual", "n_episodes": 200, "subject": "S0", "with_shield": True,
                     "without_shield": True, **self.eval},
            "rollout": {"n_episodes": 1, **self.rollout},
            "paths": dict(self.paths),
        }
