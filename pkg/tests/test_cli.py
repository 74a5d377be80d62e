import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from spine_rl.cli import main
from spine_rl.phantom import load_volume
from spine_rl.voxelgrid import BONE_LABELS

GRID = [10, 10, 6]
AGENT = {"grid_dims": GRID, "channels": [2, 4], "embed_dim": 16, "hidden": 8, "n_envs": 2, "rollout_length": 32,
         "minibatch_size": 16, "n_epochs": 1, "total_steps": 64, "checkpoint_every": 32}


def write_config(tmp_path, name="run.json", **sections):
    cfg = {"seed": 1, "env": {"grid_dims": GRID, "max_steps": 20}, "agent": AGENT}
    cfg.update(sections)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_usage_errors(tmp_path, capsys):
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["eval", "--config", str(tmp_path / "missing.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert main(["phantom", "--config", str(bad)]) == 1
    bad.write_text(json.dumps({"agent": {"bogus": 1}}))
    assert main(["train", "--config", str(bad)]) == 1
    assert "unknown" in capsys.readouterr().err


def test_runtime_errors_exit_two(tmp_path):
    cfg = write_config(tmp_path, paths={"checkpoint": str(tmp_path / "none.ckpt")})
    assert main(["eval", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_phantom_is_deterministic(tmp_path):
    cfg = write_config(tmp_path, phantom={"seed": 4})
    assert main(["phantom", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["phantom", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    assert digest(tmp_path / "a" / "phantom.raw") == digest(tmp_path / "b" / "phantom.raw")
    assert (tmp_path / "a" / "phantom_config.json").exists()


def test_phantom_scale(tmp_path):
    cfg = write_config(tmp_path, phantom={"seed": 4})
    main(["phantom", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["phantom", "--config", cfg, "--out", str(tmp_path / "s"), "--scale", "1.1"])
    base, _ = load_volume(tmp_path / "a" / "phantom.json")
    big, _ = load_volume(tmp_path / "s" / "phantom.json")
    ratio = np.isin(big.labels, BONE_LABELS).sum() / np.isin(base.labels, BONE_LABELS).sum()
    assert ratio == pytest.approx(1.331, rel=0.05)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp)
    assert main(["train", "--config", cfg, "--out", str(tmp / "train")]) == 0
    return tmp


def test_train_outputs(trained):
    out = trained / "train"
    assert (out / "final.ckpt").exists()
    assert sorted(p.name for p in out.glob("ckpt_*.ckpt")) == [
        "ckpt_000000000.ckpt", "ckpt_000000032.ckpt", "ckpt_000000064.ckpt"]
    assert len((out / "learning_curve.csv").read_text().splitlines()) == 3


def test_train_resume(trained, tmp_path):
    agent = dict(AGENT, total_steps=96)
    cfg = write_config(tmp_path, agent=agent, paths={"resume": str(trained / "train" / "ckpt_000000064.ckpt")})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "ckpt_000000096.ckpt").exists()


def test_eval_and_rollout(trained, tmp_path, capsys):
    ckpt = str(trained / "train" / "final.ckpt")
    cfg = write_config(tmp_path, paths={"checkpoint": ckpt}, eval={"n_episodes": 2}, rollout={"n_episodes": 2})
    assert main(["eval", "--config", cfg, "--out", str(tmp_path / "e")]) == 0
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert {"S0/wo", "S0/w"} <= set(report["episodes"])
    assert main(["eval", "--config", cfg, "--out", str(tmp_path / "e2"), "--no-shield"]) == 0
    assert set(json.loads((tmp_path / "e2" / "report.json").read_text())["episodes"]) == {"S0/wo"}
    for name in ("r1", "r2"):
        assert main(["rollout", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    assert digest(tmp_path / "r1" / "trajectories.jsonl") == digest(tmp_path / "r2" / "trajectories.jsonl")
    first = json.loads((tmp_path / "r1" / "trajectories.jsonl").read_text().splitlines()[0])
    assert {"episode", "t", "pose", "action", "reward", "cost", "l_safe", "shield"} <= set(first)


def test_eval_rejects_grid_mismatch(trained, tmp_path):
    ckpt = str(trained / "train" / "final.ckpt")
    cfg = write_config(tmp_path, env={"grid_dims": [12, 12, 6]}, paths={"checkpoint": ckpt})
    assert main(["eval", "--config", cfg, "--out", str(tmp_path / "e")]) == 2


def test_console_script_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "spine_rl.cli", "phantom"], capture_output=True, text=True)
    assert proc.returncode == 1
    assert "--config" in proc.stderr
