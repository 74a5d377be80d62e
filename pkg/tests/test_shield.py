import itertools
import math

import pytest

from spine_rl.env import Action, DrillingEnv, EpisodeConfig
from spine_rl.shield import ConstantPolicy, RandomPolicy, ShieldConfig, filter_action, shielded_rollout


def reference_rule(proposed, mean, std, lam, tau):
    return Action.BACKWARD if mean - lam * std < tau else proposed


def test_rule_grid():
    means = [-5.0, 0.0, 1.0, 2.0, 5.6, 10.0]
    stds = [0.0, 0.5, 1.0, 4.0]
    for mean, std, lam, tau, a in itertools.product(means, stds, [0.0, 0.5, 1.0, 2.0], [0.0, 1.0, 5.6], range(11)):
        cfg = ShieldConfig(lam, tau)
        assert filter_action(a, mean, std, cfg) == reference_rule(a, mean, std, lam, tau)


def test_boundary_equality_passes():
    # mean - lam*std == tau exactly is not below the threshold
    assert filter_action(Action.FORWARD, 3.0, 1.0, ShieldConfig(1.0, 2.0)) == Action.FORWARD
    assert filter_action(Action.FORWARD, 0.0, 0.0, ShieldConfig(1.0, 0.0)) == Action.FORWARD
    assert filter_action(Action.FORWARD, 2.999, 1.0, ShieldConfig(1.0, 2.0)) == Action.BACKWARD


def test_zero_lambda_ignores_std():
    cfg = ShieldConfig(0.0, 0.0)
    assert filter_action(Action.POS_Y, 1.0, 100.0, cfg) == Action.POS_Y


def test_invalid_inputs():
    with pytest.raises(ValueError):
        ShieldConfig(-1.0, 0.0)
    with pytest.raises(ValueError):
        filter_action(0, math.nan, 1.0, ShieldConfig())
    with pytest.raises(ValueError):
        filter_action(0, 1.0, -1.0, ShieldConfig())
    with pytest.raises(ValueError):
        ShieldConfig.from_dict({"lambda": 1.0, "bogus": 2})


def test_config_dict_round_trip():
    cfg = ShieldConfig(0.5, 5.6, True)
    assert ShieldConfig.from_dict(cfg.to_dict()) == cfg


def test_shield_logs_overrides(default_anatomy):
    env = DrillingEnv([default_anatomy], EpisodeConfig(max_steps=5))
    rec = shielded_rollout(ConstantPolicy(Action.FORWARD, mean=-1.0, std=0.0), env, ShieldConfig(), seed=0)
    assert all(s["executed"] == Action.BACKWARD and s["proposed"] == Action.FORWARD for s in rec.steps)
    assert all(s["reason"] == "shield" for s in rec.steps)
    assert len(rec.shield_steps) == 5


def test_unshielded_rollout_passes_actions(default_anatomy):
    env = DrillingEnv([default_anatomy], EpisodeConfig(max_steps=5))
    rec = shielded_rollout(ConstantPolicy(Action.FORWARD, mean=-1.0), env, None, seed=0)
    assert all(s["executed"] == Action.FORWARD and not s["shield"] for s in rec.steps)


def test_rollout_determinism(default_anatomy):
    env = DrillingEnv([default_anatomy], EpisodeConfig(max_steps=60))
    a = shielded_rollout(RandomPolicy(), env, None, seed=9)
    b = shielded_rollout(RandomPolicy(), env, None, seed=9)
    assert a.steps == b.steps


def test_oracle_shield_keeps_forward_policy_safe(default_anatomy):
    env = DrillingEnv([default_anatomy], EpisodeConfig(max_steps=80, side="random"))
    cfg = ShieldConfig(1.0, 5.6, oracle_mode=True)
    recs = [shielded_rollout(ConstantPolicy(Action.FORWARD), env, cfg, seed=seed) for seed in range(10)]
    assert all(r.safe for r in recs)
    assert any(r.shield_steps for r in recs)
