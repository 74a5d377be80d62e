"""Experiment drivers: individual and leave-one-subject-out evaluation."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..env import Anatomy, DrillingEnv, EpisodeConfig
from ..phantom import generate_phantom, level_params, scale_anatomy
from ..shield import ShieldConfig, TrajectoryRecord, shielded_rollout
from .metrics import deviation_from_gs, safe_rate

REPORT_COLUMNS = ["group", "subject", "safe_rate_wo", "safe_rate_w", "depth_wo", "depth_w", "depth_ideal",
                  "damage_wo", "damage_w", "damage_ideal"]
EXTRA_COLUMNS = ["angle_wo", "angle_w", "entry_dist_wo", "entry_dist_w", "non_entering_wo", "non_entering_w", "n"]


def episode_summary(rec: TrajectoryRecord, anatomy: Anatomy) -> dict:
    """Per-episode statistics; every aggregate is computed from these alone."""
    dev = deviation_from_gs(rec.final_axis, rec.entry_tip, anatomy.gold[rec.side])
    return {
        "seed": rec.seed,
        "anatomy": rec.anatomy,
        "side": rec.side,
        "steps": len(rec.steps),
        "cost_sum": int(sum(rec.costs)),
        "unsafe": not rec.safe,
        "penetration_mm": rec.bone_depth,
        "damage_mm": rec.damage_length,
        "ideal_penetration_mm": rec.ideal_depth,
        "ideal_damage_mm": rec.ideal_damage,
        "angle_rad": None if dev is None else dev[0],
        "entry_distance_mm": None if dev is None else dev[1],
        "shield_steps": len(rec.shield_steps),
        "reached_target": rec.reached_target,
    }


def aggregate(episodes: Sequence[dict]) -> dict:
    if not episodes:
        raise ValueError("cannot aggregate zero episodes")
    entering = [e for e in episodes if e["angle_rad"] is not None]
    return {
        "n": len(episodes),
        "safe_rate": safe_rate([[e["cost_sum"]] for e in episodes]),
        "penetration_mm": float(np.mean([e["penetration_mm"] for e in episodes])),
        "damage_mm": float(np.mean([e["damage_mm"] for e in episodes])),
        "ideal_penetration_mm": float(np.mean([e["ideal_penetration_mm"] for e in episodes])),
        "ideal_damage_mm": float(np.mean([e["ideal_damage_mm"] for e in episodes])),
        "angle_rad": float(np.mean([e["angle_rad"] for e in entering])) if entering else None,
        "entry_distance_mm": float(np.mean([e["entry_distance_mm"] for e in entering])) if entering else None,
        "non_entering": len(episodes) - len(entering),
        "shield_steps": int(sum(e["shield_steps"] for e in episodes)),
    }


def evaluate_policy(policy, anatomies: Sequence[Anatomy], n_episodes: int, env_cfg: EpisodeConfig | None = None,
                    shield: ShieldConfig | None = None, seed: int = 0, parallel: int = 1,
                    keep_records: bool = False):
    """Roll out ``n_episodes`` seeded episodes on randomly chosen anatomies.

    Episode ``i`` uses seed ``seed + i`` for both the initial pose and the
    anatomy draw, so shielded and unshielded runs see identical starts.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    env_cfg = env_cfg or EpisodeConfig()
    anatomies = list(anatomies)

    def run(i):
        env = DrillingEnv(anatomies, env_cfg)
        pick = int(np.random.default_rng([seed, i]).integers(len(anatomies)))
        rec = shielded_rollout(policy, env, shield, seed=seed + i, anatomy=pick)
        return rec, episode_summary(rec, anatomies[pick])

    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(run, range(n_episodes)))
    else:
        results = [run(i) for i in range(n_episodes)]
    episodes = [r[1] for r in results]
    if keep_records:
        return episodes, [r[0] for r in results]
    return episodes


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    episodes: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "report.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS + EXTRA_COLUMNS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: _fmt(row.get(k)) for k in REPORT_COLUMNS + EXTRA_COLUMNS})
        json_path = out_dir / "report.json"
        json_path.write_text(json.dumps({"rows": self.rows, "episodes": self.episodes, "config": self.config},
                                        indent=1))
        return csv_path, json_path

    def table(self) -> str:
        head = f"{'group':<12}{'subject':<10}{'safe w/o':>9}{'safe w/':>9}{'depth w/o':>10}{'depth w/':>9}" \
               f"{'ideal':>7}{'dmg w/o':>9}{'dmg w/':>8}{'ideal':>7}"
        lines = [head]
        for r in self.rows:
            lines.append(f"{r['group']:<12}{r['subject']:<10}{_s(r['safe_rate_wo'])}{_s(r['safe_rate_w'])}"
                         f"{_s(r['depth_wo'], 10)}{_s(r['depth_w'])}{_s(r['depth_ideal'], 7)}"
                         f"{_s(r['damage_wo'])}{_s(r['damage_w'], 8)}{_s(r['damage_ideal'], 7)}")
        return "\n".join(lines)


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _s(v, width=9):
    return f"{'-':>{width}}" if v is None else f"{v:>{width}.1f}"


def report_row(group: str, subject: str, wo: dict | None, w: dict | None) -> dict:
    ref = wo or w
    row = {"group": group, "subject": subject, "depth_ideal": ref["ideal_penetration_mm"],
           "damage_ideal": ref["ideal_damage_mm"], "n": ref["n"]}
    for suffix, agg in (("wo", wo), ("w", w)):
        row[f"safe_rate_{suffix}"] = agg and agg["safe_rate"]
        row[f"depth_{suffix}"] = agg and agg["penetration_mm"]
        row[f"damage_{suffix}"] = agg and agg["damage_mm"]
        row[f"angle_{suffix}"] = agg and agg["angle_rad"]
        row[f"entry_dist_{suffix}"] = agg and agg["entry_distance_mm"]
        row[f"non_entering_{suffix}"] = agg and agg["non_entering"]
    return row


def run_experiment(protocol: str, policies: Mapping[str, object], phantoms: Mapping[str, Sequence[Anatomy]],
                   n_episodes: int = 200, shield: ShieldConfig | None = None, with_shield: bool = True,
                   without_shield: bool = True, env_cfg: EpisodeConfig | None = None, seed: int = 0,
                   parallel: int = 1) -> EvalReport:
    """Evaluate each subject's policy on that subject's anatomies.

    For ``individual`` the policy was trained on the same subject; for
    ``cross_validation`` it was trained on the other subjects. The driver
    itself only differs in the group label; training is the caller's job.
    """
    if protocol not in ("individual", "cross_validation"):
        raise ValueError(f"unknown protocol {protocol!r}")
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if not (with_shield or without_shield):
        raise ValueError("nothing to evaluate: both shield settings disabled")
    shield = shield or ShieldConfig()
    report = EvalReport(config={"protocol": protocol, "n_episodes": n_episodes, "shield": shield.to_dict(),
                                "seed": seed})
    group = "Individual" if protocol == "individual" else "Cross Val"
    for subject, anatomies in phantoms.items():
        if subject not in policies:
            raise KeyError(f"no policy for subject {subject!r}")
        policy = policies[subject]
        aggs = {}
        for key, enabled, cfg in (("wo", without_shield, None), ("w", with_shield, shield)):
            if not enabled:
                aggs[key] = None
                continue
            eps = evaluate_policy(policy, anatomies, n_episodes, env_cfg, cfg, seed, parallel)
            report.episodes[f"{subject}/{key}"] = eps
            aggs[key] = aggregate(eps)
        report.rows.append(report_row(group, subject, aggs["wo"], aggs["w"]))
    return report


def recompute_rows(report_json: dict) -> list[dict]:
    """Rebuild report rows from the exported per-episode summaries."""
    rows = []
    group_of = {r["subject"]: r["group"] for r in report_json["rows"]}
    for subject, group in group_of.items():
        wo = report_json["episodes"].get(f"{subject}/wo")
        w = report_json["episodes"].get(f"{subject}/w")
        rows.append(report_row(group, subject, wo and aggregate(wo), w and aggregate(w)))
    return rows


# -- data set construction --------------------------------------------------

def subject_anatomies(subject: int, levels=(1, 2, 3, 4, 5), **overrides) -> list[Anatomy]:
    out = []
    for level in levels:
        vol, gs = generate_phantom(level_params(level, subject, **overrides))
        out.append(Anatomy(vol, gs, name=f"S{subject}L{level}"))
    return out


def augment_anatomies(anatomies: Sequence[Anatomy], copies: int, seed: int = 0,
                      low: float = 0.9, high: float = 1.1) -> list[Anatomy]:
    """Originals plus ``copies`` random per-axis rescalings of each anatomy."""
    rng = np.random.default_rng(seed)
    out = list(anatomies)
    for a in anatomies:
        for c in range(copies):
            s = rng.uniform(low, high, size=3)
            vol, gs = scale_anatomy(a.vol, list(a.gold.values()), s)
            out.append(Anatomy(vol, gs, name=f"{a.name}x{c}"))
    return out


def leave_one_out(subjects: Sequence) -> list[tuple[object, list]]:
    return [(held, [s for s in subjects if s != held]) for held in subjects]


def mean_or_nan(values) -> float:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else math.nan
