import json
import math

import numpy as np
import pytest

from spine_rl.env import Action, EpisodeConfig
from spine_rl.evaluation import (
    aggregate,
    augment_anatomies,
    deviation_from_gs,
    evaluate_policy,
    gs_reference_metrics,
    leave_one_out,
    length_per_volume,
    recompute_rows,
    run_experiment,
    safe_rate,
)
from spine_rl.phantom import GoldStandard
from spine_rl.shield import ConstantPolicy, RandomPolicy, ShieldConfig


def test_safe_rate_arithmetic():
    assert safe_rate([[0, 0], [0, 1], [0], [1, 1]]) == 50.0
    assert safe_rate([[0]] * 3) == 100.0
    with pytest.raises(ValueError):
        safe_rate([])


def test_length_per_volume():
    assert length_per_volume(2.0) * math.pi == pytest.approx(1.0)


def test_gs_reference_metrics(default_phantom):
    vol, gs = default_phantom
    for g in gs:
        depth, damage = gs_reference_metrics(g, vol)
        assert depth == pytest.approx(43.19, abs=0.05)
        assert damage == pytest.approx(48.63, abs=0.05)


def test_deviation_from_gs():
    g = GoldStandard("right", [0, 0, 0], [10, 0, 0], [1, 0, 0], 8.0, 5.6)
    angle, dist = deviation_from_gs([np.cos(0.146), np.sin(0.146), 0.0], [3.0, 4.0, 0.0], g)
    assert angle == pytest.approx(0.146, abs=1e-12)
    assert dist == pytest.approx(5.0)
    assert deviation_from_gs([1, 0, 0], None, g) is None


def test_backward_policy_is_safe_and_shallow(default_anatomy):
    eps = evaluate_policy(ConstantPolicy(Action.BACKWARD), [default_anatomy], 5, EpisodeConfig(max_steps=30))
    agg = aggregate(eps)
    assert agg["safe_rate"] == 100.0
    assert agg["penetration_mm"] == 0.0
    assert agg["non_entering"] == 5 and agg["angle_rad"] is None


def test_evaluation_is_seeded(default_anatomy):
    cfg = EpisodeConfig(max_steps=40)
    a = evaluate_policy(RandomPolicy(), [default_anatomy], 4, cfg, seed=7)
    b = evaluate_policy(RandomPolicy(), [default_anatomy], 4, cfg, seed=7, parallel=2)
    assert a == b


def test_zero_episodes_rejected(default_anatomy):
    with pytest.raises(ValueError):
        evaluate_policy(RandomPolicy(), [default_anatomy], 0)
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError):
        run_experiment("individual", {}, {}, n_episodes=0)


def test_report_round_trip(default_anatomy, tmp_path):
    policy = ConstantPolicy(Action.FORWARD, mean=50.0, std=1.0)
    report = run_experiment("individual", {"S0": policy}, {"S0": [default_anatomy]}, n_episodes=3,
                            shield=ShieldConfig(1.0, 0.0), env_cfg=EpisodeConfig(max_steps=30))
    csv_path, json_path = report.write(tmp_path)
    header = csv_path.read_text().splitlines()[0].split(",")
    assert header[:10] == ["group", "subject", "safe_rate_wo", "safe_rate_w", "depth_wo", "depth_w", "depth_ideal",
                           "damage_wo", "damage_w", "damage_ideal"]
    data = json.loads(json_path.read_text())
    assert recompute_rows(data) == report.rows
    assert report.rows[0]["group"] == "Individual"
    assert "Individual" in report.table()


def test_shield_changes_only_the_w_column(default_anatomy):
    cfg = EpisodeConfig(max_steps=40)
    report = run_experiment("cross_validation", {"S1": ConstantPolicy(Action.FORWARD, mean=-1.0)},
                            {"S1": [default_anatomy]}, n_episodes=3, env_cfg=cfg)
    row = report.rows[0]
    assert row["group"] == "Cross Val"
    assert row["depth_w"] == 0.0
    assert row["safe_rate_w"] == 100.0


def test_augmentation_and_folds(default_anatomy):
    out = augment_anatomies([default_anatomy], copies=2, seed=0)
    assert len(out) == 3 and out[0] is default_anatomy
    assert out[1].vol.dims != default_anatomy.vol.dims or not np.array_equal(out[1].vol.labels,
                                                                             default_anatomy.vol.labels)
    folds = leave_one_out([0, 1, 2])
    assert folds[1] == (1, [0, 2])
