"""Constrained MDP for pedicle drilling with partial, noisy observations."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .evaluation.metrics import gs_reference_metrics, length_per_volume
from .phantom import GoldStandard
from .voxelgrid import (
    DEFAULT_DRILL_LENGTH,
    DEFAULT_HORIZON,
    DEFAULT_SWEEP_STEP,
    DrillPose,
    GeometryError,
    Label,
    LabelVolume,
    _tube_voxels,
    extract_dorsal_surface,
    frame_from_forward,
    rotation_about,
    unsafe_profile,
)


class Action(enum.IntEnum):
    """Discrete drill commands (0-based; the no-op is the 11th action)."""

    FORWARD = 0  # +x
    BACKWARD = 1  # -x
    POS_Y = 2
    NEG_Y = 3
    POS_Z = 4
    NEG_Z = 5
    POS_BETA = 6  # rotation about drill y
    NEG_BETA = 7
    POS_GAMMA = 8  # rotation about drill z
    NEG_GAMMA = 9
    NOOP = 10


N_ACTIONS = len(Action)
_AXIS_SIGN = [(a // 2, 1.0 if a % 2 == 0 else -1.0) for a in range(10)]


class Region(enum.IntEnum):
    OUTSIDE = 0
    SOFT = 1
    CORTICAL = 2
    CANCELLOUS = 3


def region_of(label: int) -> Region:
    if label == Label.AIR:
        return Region.OUTSIDE
    if label == Label.CORTICAL:
        return Region.CORTICAL
    if label == Label.CANCELLOUS:
        return Region.CANCELLOUS
    # skin, muscle and no-go tissue all move like soft tissue
    return Region.SOFT


# per region: (x, y, z) translation in mm, then rotations about y and z in rad
MOTION_SCALE = {
    "outside": [5.00, 2.00, 2.00, 0.050, 0.020],
    "soft": [4.00, 0.40, 0.40, 0.010, 0.004],
    "cortical": [1.00, 0.0, 0.0, 0.0, 0.0],
    "cancellous": [2.00, 0.0, 0.0, 0.0, 0.0],
}
MOTION_NOISE = {
    "outside": [0.15, 0.15, 0.15, 0.002, 0.002],
    "soft": [0.40, 0.10, 0.10, 0.001, 0.001],
    "cortical": [0.10, 0.0, 0.0, 0.0, 0.0],
    "cancellous": [0.20, 0.0, 0.0, 0.0, 0.0],
}
_REGION_KEYS = ["outside", "soft", "cortical", "cancellous"]


@dataclass(frozen=True)
class MotionParams:
    """Step scale and noise per region; noise is both Gaussian STD and uniform half-range."""

    scale: dict = field(default_factory=lambda: {k: list(v) for k, v in MOTION_SCALE.items()})
    noise: dict = field(default_factory=lambda: {k: list(v) for k, v in MOTION_NOISE.items()})

    def __post_init__(self):
        for table in (self.scale, self.noise):
            if set(table) != set(_REGION_KEYS):
                raise ValueError(f"motion table needs regions {_REGION_KEYS}")
            for row in table.values():
                if len(row) != 5 or min(row) < 0:
                    raise ValueError("motion rows need five non-negative entries")

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([self.scale[k] for k in _REGION_KEYS], dtype=float),
                np.array([self.noise[k] for k in _REGION_KEYS], dtype=float))

    def max_forward_travel(self, clip_sigma: float = 3.0) -> float:
        """Upper bound on one forward step: scale + clip_sigma * STD + uniform range."""
        scale, noise = self.arrays()
        return float(np.max(scale[:, 0] + (clip_sigma + 1.0) * noise[:, 0]))


@dataclass(frozen=True)
class RewardWeights:
    bone: float = 1.0
    no_damage: float = 0.01
    no_enter: float = 0.4
    recover: float = 2.0


@dataclass(frozen=True)
class EpisodeConfig:
    """Episode settings, including the initial-state distribution."""

    side: str = "right"
    max_steps: int = 200
    start_depth: tuple = (20.0, 60.0)  # mm posterior of the skin
    start_halfwidth: float = 10.0  # mm, box half-size in y and z around the GS entry
    start_tilt: float = 0.15  # rad, uniform about drill y and z
    # training curriculum: share of episodes started on the GS axis instead of in the box,
    # at an offset (mm, along the GS direction from the entry point) drawn from axis_start_range
    axis_start_fraction: float = 0.0
    axis_start_range: tuple = (-30.0, 15.0)
    obs_noise_std: float = 1.0
    obs_bias_range: float = 2.0
    observation_noise: bool = True
    motion_noise: bool = True
    motion_noise_clip: float | None = None  # truncate Gaussian motion noise at this many STDs
    success_fraction: float = 0.9
    grid_dims: tuple = (50, 50, 20)
    grid_size: float = 5.0
    drill_length: float = DEFAULT_DRILL_LENGTH
    horizon: float = DEFAULT_HORIZON
    sweep_step: float = DEFAULT_SWEEP_STEP
    weights: RewardWeights = field(default_factory=RewardWeights)
    motion: MotionParams = field(default_factory=MotionParams)
    seed: int = 0

    def __post_init__(self):
        if self.side not in ("left", "right", "random"):
            raise ValueError(f"side must be left, right or random, got {self.side!r}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if len(self.grid_dims) != 3 or min(self.grid_dims) < 1 or self.grid_size <= 0:
            raise ValueError("bad observation grid")
        object.__setattr__(self, "grid_dims", tuple(int(n) for n in self.grid_dims))
        object.__setattr__(self, "start_depth", tuple(float(v) for v in self.start_depth))
        object.__setattr__(self, "axis_start_range", tuple(float(v) for v in self.axis_start_range))
        if not 0.0 <= self.axis_start_fraction <= 1.0:
            raise ValueError("axis_start_fraction must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown env config keys: {sorted(unknown)}")
        d = dict(d)
        if "weights" in d:
            w = d["weights"]
            bad = set(w) - {f.name for f in fields(RewardWeights)}
            if bad:
                raise ValueError(f"unknown reward weight keys: {sorted(bad)}")
            d["weights"] = RewardWeights(**w)
        if "motion" in d:
            m = d["motion"]
            bad = set(m) - {"scale", "noise"}
            if bad:
                raise ValueError(f"unknown motion keys: {sorted(bad)}")
            base = MotionParams()
            d["motion"] = MotionParams(scale={**base.scale, **m.get("scale", {})},
                                       noise={**base.noise, **m.get("noise", {})})
        for key in ("start_depth", "grid_dims"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start_depth"] = list(self.start_depth)
        d["grid_dims"] = list(self.grid_dims)
        return d


@dataclass
class StepOutcome:
    observation: np.ndarray
    reward: float
    r_bone: float
    r_ndam: float
    r_nenter: float
    r_recover: float
    cost: int
    l_safe: float
    done: bool
    reached_target: bool
    unsafe_now: bool
    region: Region
    bone_depth: float
    damage_length: float


def _drill_cells(dims, size, diameter, length) -> np.ndarray:
    """Observation-grid cells covered by the drill (axis cells plus cells within the radius)."""
    dims = np.asarray(dims)
    half = dims // 2
    s = np.arange(-length, 0.0 + 1e-9, size / 4.0)
    axis_pts = np.column_stack([s, np.zeros_like(s), np.zeros_like(s)])
    cells = np.floor(axis_pts / size).astype(np.int64) + half
    grid = np.indices(dims).reshape(3, -1).T
    centers = (grid - half + 0.5) * size
    inside = (centers[:, 0] >= -length) & (centers[:, 0] <= 0) & (np.hypot(centers[:, 1], centers[:, 2]) <= diameter / 2)
    cells = np.concatenate([cells, grid[inside]])
    ok = np.all((cells >= 0) & (cells < dims), axis=1)
    return np.unique(cells[ok], axis=0)


def encode_observation(
    pose: DrillPose,
    surface,
    diameter: float,
    grid_dims=(50, 50, 20),
    grid_size: float = 5.0,
    drill_length: float = DEFAULT_DRILL_LENGTH,
    bias=None,
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
    drill_cells: np.ndarray | None = None,
) -> np.ndarray:
    """Drill-frame label grid: 1 for drill cells, 2 for surface points, 0 elsewhere."""
    dims = np.asarray(grid_dims)
    obs = np.zeros(tuple(dims), dtype=np.uint8)
    pts = pose.to_drill_frame(surface)
    if bias is not None:
        pts = pts + np.asarray(bias)
    if noise_std > 0:
        pts = pts + rng.normal(0.0, noise_std, size=pts.shape)
    cells = np.floor(pts / grid_size).astype(np.int64) + dims // 2
    ok = np.all((cells >= 0) & (cells < dims), axis=1)
    cells = cells[ok]
    obs[cells[:, 0], cells[:, 1], cells[:, 2]] = 2
    if drill_cells is None:
        drill_cells = _drill_cells(dims, grid_size, diameter, drill_length)
    obs[drill_cells[:, 0], drill_cells[:, 1], drill_cells[:, 2]] = 1
    return obs


class Anatomy:
    """One vertebra environment: label volume, gold standards and cached references."""

    def __init__(self, vol: LabelVolume, gold: Sequence[GoldStandard], name: str = ""):
        self.vol = vol
        self.gold = {g.side: g for g in gold}
        self.name = name
        self.surface = extract_dorsal_surface(vol)
        body = np.flatnonzero(np.any(vol.labels != Label.AIR, axis=(1, 2)))
        if body.size == 0:
            raise GeometryError("volume has no tissue")
        self.skin_x = float(vol.origin[0] + vol.spacing * (body[0] - 0.5))
        self.ideal = {side: gs_reference_metrics(g, vol) for side, g in self.gold.items()}


class DrillingEnv:
    """Stateful single-episode simulator.

    ``reset`` samples an initial drill pose above the target side;
    ``step`` applies one discrete command under region-dependent scales and
    noise and returns the full reward/cost breakdown.
    """

    def __init__(self, anatomies, cfg: EpisodeConfig | None = None):
        if isinstance(anatomies, Anatomy):
            anatomies = [anatomies]
        self.anatomies = list(anatomies)
        if not self.anatomies:
            raise ValueError("need at least one anatomy")
        self.cfg = cfg or EpisodeConfig()
        self.rng = np.random.default_rng(self.cfg.seed)
        self._scale, self._noise = self.cfg.motion.arrays()
        self._drill_cells = {}
        self.active = False
        self.t = 0

    @property
    def observation_shape(self):
        return self.cfg.grid_dims

    # -- episode lifecycle -------------------------------------------------
    def reset(self, seed: int | None = None, anatomy: int | None = None, side: str | None = None) -> np.ndarray:
        cfg = self.cfg
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        rng = self.rng
        k = int(rng.integers(len(self.anatomies))) if anatomy is None else anatomy
        self.anatomy = self.anatomies[k]
        side = side or cfg.side
        if side == "random":
            side = "right" if rng.random() < 0.5 else "left"
        self.side = side
        self.gs = self.anatomy.gold[side]
        self.diameter = self.gs.diameter
        self.ideal_depth = self.anatomy.ideal[side][0]
        vol = self.anatomy.vol

        depth = rng.uniform(*cfg.start_depth)
        x0 = self.anatomy.skin_x - depth
        if x0 < vol.origin[0] - cfg.drill_length:
            raise GeometryError("initial-pose sampler box lies outside the volume")
        # box centred laterally on the pedicle entry point
        y0 = self.gs.entry[1] + rng.uniform(-cfg.start_halfwidth, cfg.start_halfwidth)
        z0 = self.gs.entry[2] + rng.uniform(-cfg.start_halfwidth, cfg.start_halfwidth)
        b0, g0 = rng.uniform(-cfg.start_tilt, cfg.start_tilt, size=2)
        tilt = rotation_about(1, b0) @ rotation_about(2, g0)
        if cfg.axis_start_fraction > 0 and rng.random() < cfg.axis_start_fraction:
            offset = rng.uniform(*cfg.axis_start_range)
            self.pose = DrillPose(self.gs.entry + offset * self.gs.direction,
                                  frame_from_forward(self.gs.direction) @ tilt)
        else:
            self.pose = DrillPose([x0, y0, z0], tilt)
        self.obs_bias = (rng.uniform(-cfg.obs_bias_range, cfg.obs_bias_range, size=3)
                         if cfg.observation_noise else np.zeros(3))
        self.damage = np.zeros(vol.labels.size, dtype=bool)
        self.t = 0
        self.active = True
        self.granted_bone = 0.0
        self._evaluate()
        self.prev_unsafe = self.unsafe
        return self.observe()

    def _evaluate(self):
        vol = self.anatomy.vol
        cfg = self.cfg
        tube = _tube_voxels(self.pose, self.diameter / 2, cfg.drill_length, cfg.horizon, vol)
        ts, unsafe = unsafe_profile(self.pose, self.diameter, vol, cfg.horizon, cfg.sweep_step,
                                    cfg.drill_length, tube)
        flat, s = tube
        drill = flat[s <= 0.0]
        lab = vol.labels.ravel()[drill]
        k = length_per_volume(self.diameter) * vol.voxel_volume
        self.bone_depth = k * int(np.count_nonzero(lab == Label.CANCELLOUS))
        self.damage[drill[lab == Label.PRESERVE]] = True
        self.damage_length = k * int(np.count_nonzero(self.damage))
        self.unsafe = bool(unsafe[0])
        hits = np.flatnonzero(unsafe)
        self.l_safe = float(ts[hits[0]]) if hits.size else float(cfg.horizon)
        self.region = region_of(int(vol.label_at(self.pose.tip)))

    def observe(self) -> np.ndarray:
        cfg = self.cfg
        key = round(self.diameter, 9)
        if key not in self._drill_cells:
            self._drill_cells[key] = _drill_cells(cfg.grid_dims, cfg.grid_size, self.diameter, cfg.drill_length)
        return encode_observation(
            self.pose, self.anatomy.surface, self.diameter, cfg.grid_dims, cfg.grid_size, cfg.drill_length,
            bias=self.obs_bias, noise_std=cfg.obs_noise_std if cfg.observation_noise else 0.0,
            rng=self.rng, drill_cells=self._drill_cells[key])

    def correct_side(self) -> bool:
        y = self.pose.tip[1]
        return y > 0 if self.side == "right" else y < 0

    def _displacement(self, action: int, region: Region) -> np.ndarray:
        motion = np.zeros(5)
        if action == Action.NOOP:
            return motion
        axis, sign = _AXIS_SIGN[action]
        scale = self._scale[region, axis]
        noise = self._noise[region, axis] if self.cfg.motion_noise else 0.0
        value = sign * scale
        if noise > 0:
            gauss = self.rng.normal(0.0, noise)
            clip = self.cfg.motion_noise_clip
            if clip is not None:
                gauss = float(np.clip(gauss, -clip * noise, clip * noise))
            value += gauss + self.rng.uniform(-noise, noise)
        motion[axis] = value
        return motion

    def step(self, action) -> StepOutcome:
        if not self.active:
            raise RuntimeError("step() called on a finished episode; call reset()")
        action = int(action)
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"invalid action {action}")
        w = self.cfg.weights
        region = self.region
        prev_depth, prev_damage = self.bone_depth, self.damage_length
        m = self._displacement(action, region)
        self.pose = self.pose.moved(m[:3], beta=m[3], gamma=m[4])
        self._evaluate()
        self.t += 1

        r_bone = self.bone_depth - prev_depth if self.correct_side() else 0.0
        self.granted_bone += r_bone
        r_ndam = prev_damage - self.damage_length
        u, u_prev = int(self.unsafe), int(self.prev_unsafe)
        r_nenter = -(1 - u_prev) * u * self.granted_bone
        r_recover = u * (float(action == Action.BACKWARD) - float(action == Action.FORWARD))
        reward = w.bone * r_bone + w.no_damage * r_ndam + w.no_enter * r_nenter + w.recover * r_recover
        self.prev_unsafe = self.unsafe

        reached = bool(self.correct_side() and self.bone_depth >= self.cfg.success_fraction * self.ideal_depth)
        done = reached or self.t >= self.cfg.max_steps
        self.active = not done
        return StepOutcome(
            observation=self.observe(), reward=float(reward), r_bone=float(r_bone), r_ndam=float(r_ndam),
            r_nenter=float(r_nenter), r_recover=float(r_recover), cost=u, l_safe=self.l_safe, done=done,
            reached_target=reached, unsafe_now=bool(self.unsafe), region=self.region, bone_depth=self.bone_depth,
            damage_length=self.damage_length)

    def ground_truth_safe_distance(self) -> float:
        return self.l_safe

    def step_record(self, action: int, out: StepOutcome, **extra) -> dict:
        rec = {
            "t": self.t,
            "pose": self.pose.to_dict(),
            "action": int(action),
            "reward": out.reward,
            "r_bone": out.r_bone,
            "r_ndam": out.r_ndam,
            "r_nenter": out.r_nenter,
            "r_recover": out.r_recover,
            "cost": int(out.cost),
            "l_safe": float(out.l_safe),
            "region": out.region.name.lower(),
        }
        rec.update(extra)
        return rec


def load_env_config(path) -> EpisodeConfig:
    with open(path) as fh:
        return EpisodeConfig.from_dict(json.load(fh))
