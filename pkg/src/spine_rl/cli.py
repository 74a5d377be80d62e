"""Command-line entry point: ``spine-rl phantom|train|eval|rollout``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig

log = logging.getLogger("spine_rl")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spine-rl", description="Simulated pedicle drilling with shielded PPO.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (("phantom", "generate a labeled vertebra volume"),
                        ("train", "train a policy with PPO"),
                        ("eval", "evaluate a checkpoint with and without the shield"),
                        ("rollout", "export shielded trajectories as JSON lines")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--parallel", type=int, default=None, help="concurrent episodes")
        if name in ("eval", "rollout"):
            g = p.add_mutually_exclusive_group()
            g.add_argument("--shield", dest="shield", action="store_true", default=None)
            g.add_argument("--no-shield", dest="shield", action="store_false")
        if name == "phantom":
            p.add_argument("--scale", type=float, default=None, help="isotropic anatomy scale factor")
    return parser


def thread_cap() -> int | None:
    raw = os.environ.get("SPINE_RL_THREADS")
    if not raw:
        return None
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"SPINE_RL_THREADS must be an integer, got {raw!r}") from None
    if cap < 1:
        raise ConfigError("SPINE_RL_THREADS must be >= 1")
    return cap


def _resolve(args) -> tuple[RunConfig, Path, int]:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.parallel is not None:
        cfg.parallel = args.parallel
    if getattr(args, "scale", None) is not None:
        cfg.phantom["scale"] = args.scale
    cfg.validate()
    parallel = int(cfg.parallel)
    cap = thread_cap()
    if cap is not None:
        parallel = min(parallel, cap)
        torch.set_num_threads(cap)
    out = Path(args.out or cfg.paths.get("out", "."))
    return cfg, out, parallel


def _log_config(cfg: RunConfig, out: Path, command: str, parallel: int):
    resolved = cfg.resolved()
    resolved["command"] = command
    resolved["parallel"] = parallel
    text = json.dumps(resolved, indent=1, sort_keys=True)
    log.info("resolved config:\n%s", text)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}_config.json").write_text(text + "\n")


def _load_anatomies(cfg: RunConfig):
    from .env import Anatomy
    from .phantom import generate_phantom, load_volume

    if not cfg.phantoms:
        vol, gs = generate_phantom(cfg.phantom_params())
        return [Anatomy(vol, gs, name="generated")]
    out = []
    for path in cfg.phantoms:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"phantom file not found: {path}")
        vol, gs = load_volume(path)
        out.append(Anatomy(vol, gs, name=path.stem))
    return out


def _load_agent(cfg: RunConfig):
    from .agent import SafePPOAgent

    ckpt = cfg.paths.get("checkpoint")
    if not ckpt:
        raise ConfigError("paths.checkpoint is required")
    if not Path(ckpt).exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    return SafePPOAgent.from_checkpoint(ckpt, expected_grid_dims=cfg.env_config().grid_dims)


def cmd_phantom(cfg: RunConfig, out: Path, parallel: int) -> int:
    from .phantom import generate_phantom, nogo_enclosed, save_volume, scale_anatomy
    from .voxelgrid import LABEL_NAMES

    vol, gs = generate_phantom(cfg.phantom_params())
    scale = cfg.phantom.get("scale")
    if scale is not None and scale != 1.0:
        vol, gs = scale_anatomy(vol, gs, float(scale))
    if not nogo_enclosed(vol):
        raise RuntimeError("generated phantom leaves the no-go region exposed")
    path = save_volume(vol, gs, out / "phantom.json")
    counts = vol.label_counts()
    for label, name in enumerate(LABEL_NAMES):
        print(f"{name:<12}{counts.get(label, 0):>10d}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path, parallel: int) -> int:
    from .agent import SafePPOAgent, save_checkpoint
    from .env import DrillingEnv

    anatomies = _load_anatomies(cfg)
    env_cfg = cfg.env_config()
    resume = cfg.paths.get("resume")
    if resume:
        if not Path(resume).exists():
            raise FileNotFoundError(f"resume checkpoint not found: {resume}")
        agent = SafePPOAgent.from_checkpoint(resume, expected_grid_dims=env_cfg.grid_dims)
        agent.set_params(**{k: v for k, v in cfg.agent.items() if k == "total_steps"})
        log.info("resuming from %s at step %d", resume, agent.step_)
    else:
        agent = SafePPOAgent(**{"random_state": cfg.seed, **cfg.agent})
    envs = [DrillingEnv(anatomies, env_cfg) for _ in range(agent.n_envs)]

    def on_ckpt(ckpt):
        path = save_checkpoint(ckpt, out / f"ckpt_{ckpt.step:09d}.ckpt")
        log.info("checkpoint %s", path)

    agent.fit(envs, out_dir=out, resume=bool(resume), on_checkpoint=on_ckpt)
    agent.save(out / "final.ckpt")
    print(f"trained to step {agent.step_}; wrote {out / 'final.ckpt'}")
    return EXIT_OK


def _shield_flags(args, cfg: RunConfig) -> tuple[bool, bool]:
    if args.shield is None:
        return bool(cfg.eval.get("with_shield", True)), bool(cfg.eval.get("without_shield", True))
    return args.shield, not args.shield


def cmd_eval(cfg: RunConfig, out: Path, parallel: int, args) -> int:
    from .evaluation import recompute_rows, run_experiment

    agent = _load_agent(cfg)
    anatomies = _load_anatomies(cfg)
    with_shield, without_shield = _shield_flags(args, cfg)
    subject = str(cfg.eval.get("subject", "S0"))
    report = run_experiment(cfg.eval.get("protocol", "individual"), {subject: agent}, {subject: anatomies},
                            n_episodes=int(cfg.eval.get("n_episodes", 200)), shield=cfg.shield_config(),
                            with_shield=with_shield, without_shield=without_shield, env_cfg=cfg.env_config(),
                            seed=cfg.seed, parallel=parallel)
    csv_path, json_path = report.write(out)
    drift = recompute_rows(json.loads(json_path.read_text())) != report.rows
    if drift:
        raise RuntimeError("report rows do not match recomputation from exported episodes")
    print(report.table())
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def cmd_rollout(cfg: RunConfig, out: Path, parallel: int, args) -> int:
    from .env import DrillingEnv
    from .shield import shielded_rollout

    agent = _load_agent(cfg)
    anatomies = _load_anatomies(cfg)
    shield = cfg.shield_config() if args.shield is not False else None
    env = DrillingEnv(anatomies, cfg.env_config())
    n = int(cfg.rollout.get("n_episodes", 1))
    if n < 1:
        raise ConfigError("rollout.n_episodes must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    path = out / "trajectories.jsonl"
    with open(path, "w") as fh:
        for ep in range(n):
            pick = int(rng.integers(len(anatomies)))
            rec = shielded_rollout(agent, env, shield, seed=cfg.seed + ep, anatomy=pick)
            for step in rec.steps:
                fh.write(json.dumps({"episode": ep, "anatomy": rec.anatomy, "side": rec.side, **step}) + "\n")
            log.info("episode %d: %d steps, safe=%s, depth %.1f mm", ep, len(rec.steps), rec.safe, rec.bone_depth)
    print(f"wrote {path}")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg, out, parallel = _resolve(args)
        _log_config(cfg, out, args.command, parallel)
        if args.command == "phantom":
            return cmd_phantom(cfg, out, parallel)
        if args.command == "train":
            return cmd_train(cfg, out, parallel)
        if args.command == "eval":
            return cmd_eval(cfg, out, parallel, args)
        return cmd_rollout(cfg, out, parallel, args)
    except ConfigError as exc:
        print(f"spine-rl: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"spine-rl: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
