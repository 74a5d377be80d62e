import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spine_rl.env import (
    N_ACTIONS,
    Action,
    Anatomy,
    DrillingEnv,
    EpisodeConfig,
    MotionParams,
    Region,
    encode_observation,
    load_env_config,
    region_of,
)
from spine_rl.voxelgrid import DrillCylinder, DrillPose, GeometryError, Label, frame_from_forward, is_safe, safe_distance


def quiet(**kw):
    return EpisodeConfig(observation_noise=False, motion_noise=False, **kw)


def on_axis_env(anatomy, offset=-30.0, **kw):
    cfg = quiet(axis_start_fraction=1.0, axis_start_range=(offset, offset), start_tilt=0.0, **kw)
    return DrillingEnv([anatomy], cfg)


def run(env, actions):
    outs = []
    for a in actions:
        if not env.active:
            break
        outs.append(env.step(a))
    return outs


def test_action_layout():
    assert N_ACTIONS == 11
    assert Action.FORWARD == 0 and Action.BACKWARD == 1 and Action.NOOP == 10


def test_region_mapping():
    assert region_of(Label.AIR) == Region.OUTSIDE
    for lab in (Label.FREE, Label.PRESERVE, Label.NOGO):
        assert region_of(lab) == Region.SOFT
    assert region_of(Label.CORTICAL) == Region.CORTICAL
    assert region_of(Label.CANCELLOUS) == Region.CANCELLOUS


def test_forward_travel_bound():
    assert MotionParams().max_forward_travel() == pytest.approx(5.6)


def test_reset_determinism(env):
    a = env.reset(seed=11)
    b = env.reset(seed=11)
    assert np.array_equal(a, b)


def test_resets_start_in_air(default_anatomy):
    env = DrillingEnv([default_anatomy], EpisodeConfig(side="random"))
    vol = default_anatomy.vol
    for seed in range(1000):
        env.reset(seed=seed)
        assert vol.label_at(env.pose.tip) == Label.AIR
        assert is_safe(DrillCylinder(env.pose, env.diameter), vol)
        assert env.bone_depth == 0.0
        assert default_anatomy.skin_x - 60 <= env.pose.tip[0] <= default_anatomy.skin_x - 20


def test_reset_outside_volume_is_rejected(default_anatomy):
    env = DrillingEnv([default_anatomy], EpisodeConfig(start_depth=(400.0, 500.0)))
    with pytest.raises(GeometryError):
        env.reset(seed=0)


def test_observation_values(env):
    obs = env.reset(seed=3)
    assert obs.shape == (50, 50, 20)
    assert set(np.unique(obs)) <= {0, 1, 2}
    assert obs[25, 25, 10] == 1 or (obs == 1).any()
    assert (obs == 2).any()


def test_observation_point_ahead_of_tip():
    pose = DrillPose([0.0, 0.0, 0.0], np.eye(3))
    obs = encode_observation(pose, np.array([[50.0, 0.0, 0.0]]), 6.0)
    tip_cell = np.array([25, 25, 10])
    assert obs[tuple(tip_cell + [10, 0, 0])] == 2
    assert obs[tuple(tip_cell)] == 1


def test_observation_drill_precedence():
    pose = DrillPose([3.0, 2.0, 1.0], np.eye(3))
    obs = encode_observation(pose, np.array([[3.0, 2.0, 1.0]]), 6.0)
    assert obs[25, 25, 10] == 1
    assert not (obs == 2).any()


def test_observation_translation_invariance(rng):
    rot = frame_from_forward([0.9, 0.3, -0.2])
    surface = rng.uniform(-60, 60, size=(300, 3))
    shift = np.array([12.3, -4.5, 7.7])
    a = encode_observation(DrillPose([1.0, 2.0, 3.0], rot), surface, 6.0)
    b = encode_observation(DrillPose(np.array([1.0, 2.0, 3.0]) + shift, rot), surface + shift, 6.0)
    assert np.array_equal(a, b)


def test_forward_in_air_moves_five_mm(default_anatomy):
    env = DrillingEnv([default_anatomy], quiet())
    env.reset(seed=0)
    tip, fwd = env.pose.tip.copy(), env.pose.forward.copy()
    env.step(Action.FORWARD)
    assert np.allclose(env.pose.tip, tip + 5.0 * fwd, atol=1e-12)


def test_noop_keeps_pose(env):
    env.reset(seed=5)
    for _ in range(5):
        before = env.pose
        out = env.step(Action.NOOP)
        assert np.array_equal(env.pose.tip, before.tip)
        assert np.array_equal(env.pose.rotation, before.rotation)
        assert out.r_bone == 0.0


def test_step_after_done(default_anatomy):
    env = DrillingEnv([default_anatomy], EpisodeConfig(max_steps=2))
    env.reset(seed=0)
    env.step(Action.NOOP)
    assert env.step(Action.NOOP).done
    with pytest.raises(RuntimeError):
        env.step(Action.NOOP)
    env.reset(seed=0)
    with pytest.raises(ValueError):
        env.step(N_ACTIONS)


def test_cancellous_advance_reward(default_anatomy):
    env = on_axis_env(default_anatomy, offset=10.0)
    env.reset(seed=0)
    assert env.region == Region.CANCELLOUS
    out = env.step(Action.FORWARD)
    assert out.r_bone == pytest.approx(2.0, abs=0.5)


def test_region_gating_in_bone(default_anatomy):
    env = on_axis_env(default_anatomy, offset=8.0, max_steps=500)
    env.reset(seed=0)
    for a in range(2, 10):
        assert env.region in (Region.CORTICAL, Region.CANCELLOUS)
        before = env.pose
        env.step(a)
        assert np.array_equal(env.pose.tip, before.tip)
        assert np.array_equal(env.pose.rotation, before.rotation)


def test_reward_algebra_on_scripted_run(default_anatomy):
    env = on_axis_env(default_anatomy, offset=-40.0, max_steps=300, success_fraction=10.0)
    env.reset(seed=0)
    actions = [Action.FORWARD] * 45 + [Action.BACKWARD] * 5 + [Action.FORWARD] * 10 + [Action.NOOP] * 3
    outs, sides = [], []
    for a in actions:
        outs.append(env.step(a))
        sides.append(env.correct_side())
    w = env.cfg.weights
    damage = [o.damage_length for o in outs]
    assert np.all(np.diff(damage) >= 0)
    depth = [0.0] + [o.bone_depth for o in outs]
    for i, o in enumerate(outs):
        # bone progress telescopes while the tip stays on the target side
        assert o.r_bone == pytest.approx(depth[i + 1] - depth[i] if sides[i] else 0.0, abs=1e-12)
    unsafe_prev = False
    granted = 0.0
    saw_transition = False
    for a, o in zip(actions, outs):
        assert o.r_ndam <= 0
        assert o.reward == pytest.approx(w.bone * o.r_bone + w.no_damage * o.r_ndam
                                         + w.no_enter * o.r_nenter + w.recover * o.r_recover)
        assert o.cost == int(o.unsafe_now)
        granted += o.r_bone
        if o.unsafe_now and not unsafe_prev:
            assert o.r_nenter == pytest.approx(-granted)
            saw_transition = True
        else:
            assert o.r_nenter == 0.0
        expect = (1.0 if a == Action.BACKWARD else -1.0 if a == Action.FORWARD else 0.0) if o.unsafe_now else 0.0
        assert o.r_recover == expect
        unsafe_prev = o.unsafe_now
    assert saw_transition


def test_cost_matches_safety_predicate(env):
    env.reset(seed=2)
    rng = np.random.default_rng(0)
    while env.active:
        out = env.step(int(rng.integers(N_ACTIONS)) if rng.random() < 0.5 else Action.FORWARD)
        safe = is_safe(DrillCylinder(env.pose, env.diameter, env.cfg.drill_length), env.anatomy.vol)
        assert out.cost == (0 if safe else 1)
        assert (out.l_safe == 0.0) == (not safe)


def test_l_safe_matches_oracle(env):
    env.reset(seed=4)
    for _ in range(12):
        out = env.step(Action.FORWARD)
        assert out.l_safe == safe_distance(env.pose, env.diameter, env.anatomy.vol)


def test_wrong_side_grants_no_bone(default_anatomy):
    env = on_axis_env(default_anatomy, offset=-10.0)
    env.reset(seed=0, side="left")
    # pretend the target is the other pedicle
    env.side = "right"
    outs = run(env, [Action.FORWARD] * 10)
    assert all(o.r_bone == 0.0 for o in outs)
    assert outs[-1].bone_depth > 0


def test_reaching_target_ends_episode(default_anatomy):
    env = on_axis_env(default_anatomy, offset=-20.0)
    env.reset(seed=0)
    outs = run(env, [Action.FORWARD] * 100)
    assert outs[-1].reached_target and outs[-1].done
    assert outs[-1].bone_depth >= 0.9 * env.ideal_depth


def test_unsafe_does_not_terminate(default_anatomy):
    env = on_axis_env(default_anatomy, offset=-10.0, success_fraction=10.0)
    env.reset(seed=0)
    outs = run(env, [Action.FORWARD] * 60)
    assert any(o.unsafe_now for o in outs)
    assert not any(o.done for o in outs)


@settings(max_examples=10, deadline=None)
@given(st.lists(st.integers(0, N_ACTIONS - 1), min_size=1, max_size=40), st.integers(0, 10_000))
def test_seeded_determinism(default_anatomy, actions, seed):
    trajs = []
    for _ in range(2):
        env = DrillingEnv([default_anatomy], EpisodeConfig())
        obs = [env.reset(seed=seed)]
        rec = []
        for a in actions:
            out = env.step(a)
            obs.append(out.observation)
            rec.append((env.pose.tip.tobytes(), out.reward, out.cost, out.l_safe))
        trajs.append((obs, rec))
    assert trajs[0][1] == trajs[1][1]
    assert all(np.array_equal(a, b) for a, b in zip(trajs[0][0], trajs[1][0]))


@settings(max_examples=10, deadline=None)
@given(st.lists(st.integers(0, N_ACTIONS - 1), min_size=5, max_size=60), st.integers(0, 1000))
def test_invariants_under_random_actions(default_anatomy, actions, seed):
    env = DrillingEnv([default_anatomy], EpisodeConfig(axis_start_fraction=0.5))
    env.reset(seed=seed)
    prev_damage = 0.0
    total_bone = 0.0
    for a in actions:
        if not env.active:
            break
        region = env.region
        before = env.pose
        out = env.step(a)
        total_bone += out.r_bone
        assert out.damage_length >= prev_damage
        prev_damage = out.damage_length
        if region in (Region.CORTICAL, Region.CANCELLOUS) and a >= Action.POS_Y:
            assert np.array_equal(before.rotation, env.pose.rotation)
            assert np.array_equal(before.tip, env.pose.tip)
    if env.correct_side() and total_bone != 0.0:
        assert total_bone <= env.bone_depth + 1e-9


def test_step_record_is_json(env):
    env.reset(seed=1)
    out = env.step(Action.FORWARD)
    rec = env.step_record(Action.FORWARD, out)
    back = json.loads(json.dumps(rec))
    for key in ("t", "pose", "action", "reward", "r_bone", "r_ndam", "r_nenter", "r_recover", "cost", "l_safe",
                "region"):
        assert key in back


def test_env_config_round_trip(tmp_path):
    cfg = EpisodeConfig(max_steps=50, grid_dims=(20, 20, 10), axis_start_fraction=0.25)
    d = cfg.to_dict()
    assert EpisodeConfig.from_dict(d) == cfg
    path = tmp_path / "env.json"
    path.write_text(json.dumps(d))
    assert load_env_config(path) == cfg
    with pytest.raises(ValueError):
        EpisodeConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        EpisodeConfig.from_dict({"weights": {"bogus": 1}})
    with pytest.raises(ValueError):
        EpisodeConfig(max_steps=0)


def test_anatomy_requires_tissue():
    from spine_rl.voxelgrid import LabelVolume

    labels = np.zeros((4, 4, 4), dtype=np.uint8)
    labels[2] = Label.CORTICAL
    a = Anatomy(LabelVolume(labels), [])
    assert a.skin_x == pytest.approx(1.5)
