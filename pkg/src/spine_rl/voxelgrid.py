"""Labeled voxel volumes and drill geometry.

World frame: +x posterior to anterior (nominal insertion direction), +y
lateral (left pedicle at y < 0), +z caudal to cranial. The drill frame has
its forward axis along drill x; the drill body extends from the tip backward
along drill -x.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DRILL_LENGTH = 120.0
DEFAULT_HORIZON = 150.0
DEFAULT_SWEEP_STEP = 0.5


class Label(enum.IntEnum):
    AIR = 0
    FREE = 1
    PRESERVE = 2
    CORTICAL = 3
    CANCELLOUS = 4
    NOGO = 5


LABEL_NAMES = ["Air", "Free", "Preserve", "Cortical", "Cancellous", "NoGo"]
BONE_LABELS = (Label.CORTICAL, Label.CANCELLOUS)


class GeometryError(ValueError):
    """Raised for malformed volumes or anatomy that cannot be processed."""


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Immutable labeled voxel grid.

    ``labels[i, j, k]`` is the label of the voxel whose center sits at
    ``origin + spacing * (i, j, k)``.
    """

    labels: np.ndarray
    spacing: float = 1.0
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise GeometryError(f"labels must be a non-empty 3-D array, got shape {labels.shape}")
        if not self.spacing > 0:
            raise GeometryError(f"spacing must be positive, got {self.spacing}")
        if labels.size and labels.max() > max(Label):
            raise GeometryError(f"unknown label value {int(labels.max())}")
        labels = np.array(labels, dtype=np.uint8, order="C")
        labels.flags.writeable = False
        origin = np.asarray(self.origin, dtype=float).reshape(3).copy()
        origin.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.labels.shape)

    @property
    def voxel_volume(self) -> float:
        return self.spacing**3

    @property
    def center(self) -> np.ndarray:
        return self.origin + self.spacing * (np.asarray(self.dims) - 1) / 2.0

    def index_to_world(self, idx) -> np.ndarray:
        return self.origin + self.spacing * np.asarray(idx, dtype=float)

    def world_to_index(self, points) -> np.ndarray:
        """Nearest voxel index for each world point (may be out of bounds)."""
        return np.rint((np.asarray(points, dtype=float) - self.origin) / self.spacing).astype(np.int64)

    def label_at(self, points) -> np.ndarray:
        """Nearest-voxel labels; points outside the grid read as Air."""
        pts = np.asarray(points, dtype=float)
        idx = self.world_to_index(pts.reshape(-1, 3))
        inside = np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=1)
        out = np.zeros(len(idx), dtype=np.uint8)
        ii = idx[inside]
        out[inside] = self.labels[ii[:, 0], ii[:, 1], ii[:, 2]]
        return out.reshape(pts.shape[:-1])

    def label_counts(self) -> dict[Label, int]:
        counts = np.bincount(self.labels.ravel(), minlength=len(Label))
        return {lab: int(counts[lab]) for lab in Label}

    def unravel(self, flat) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(flat, dtype=np.int64), self.dims), axis=-1)


def rotation_about(axis: int, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    if axis == 0:
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == 1:
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def frame_from_forward(forward) -> np.ndarray:
    """World-from-drill rotation whose first column is ``forward``.

    Drill y is kept in the world x-y plane, so a drill along world +x gets
    the identity orientation.
    """
    f = np.asarray(forward, dtype=float)
    f = f / np.linalg.norm(f)
    up = np.array([0.0, 0.0, 1.0]) if abs(f[2]) < 0.99 else np.array([0.0, 1.0, 0.0])
    y = np.cross(up, f)
    y /= np.linalg.norm(y)
    return np.column_stack([f, y, np.cross(f, y)])


@dataclass(frozen=True)
class DrillPose:
    tip: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        tip = np.asarray(self.tip, dtype=float).reshape(3).copy()
        rot = np.asarray(self.rotation, dtype=float).reshape(3, 3).copy()
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9) or abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise GeometryError("drill orientation must be a proper rotation")
        object.__setattr__(self, "tip", tip)
        object.__setattr__(self, "rotation", rot)

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 0]

    def translated(self, distance: float) -> "DrillPose":
        return DrillPose(self.tip + distance * self.forward, self.rotation)

    def moved(self, delta_drill=(0.0, 0.0, 0.0), beta: float = 0.0, gamma: float = 0.0) -> "DrillPose":
        """Translate in the drill frame, then rotate about drill y and z at the tip."""
        tip = self.tip + self.rotation @ np.asarray(delta_drill, dtype=float)
        rot = self.rotation
        if beta:
            rot = rot @ rotation_about(1, beta)
        if gamma:
            rot = rot @ rotation_about(2, gamma)
        if beta or gamma:
            # re-orthonormalize to keep drift below the pose tolerance
            u, _, vt = np.linalg.svd(rot)
            rot = u @ vt
        return DrillPose(tip, rot)

    def to_drill_frame(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.tip) @ self.rotation

    def to_dict(self) -> dict:
        return {"tip": self.tip.tolist(), "rotation": self.rotation.tolist()}


@dataclass(frozen=True)
class DrillCylinder:
    pose: DrillPose
    diameter: float
    length: float = DEFAULT_DRILL_LENGTH

    def __post_init__(self):
        if not (self.diameter > 0 and self.length > 0):
            raise GeometryError("drill diameter and length must be positive")


def _tube_voxels(pose: DrillPose, radius: float, back: float, ahead: float, vol: LabelVolume):
    """Voxels within ``radius`` of the axis segment s in [-back, ahead].

    Returns flat indices (sorted) and the axial coordinate s of each voxel
    center relative to the tip. The search walks slices normal to the
    dominant axis of the drill direction so the candidate count stays close
    to the true tube volume.
    """
    f = pose.forward
    dims = np.asarray(vol.dims)
    sp = vol.spacing
    a = pose.tip - back * f
    b = pose.tip + ahead * f
    main = int(np.argmax(np.abs(f)))
    o1, o2 = [ax for ax in range(3) if ax != main]
    ia = (a - vol.origin) / sp
    ib = (b - vol.origin) / sp
    rv = radius / sp
    lo = int(np.floor(min(ia[main], ib[main]) - rv)) - 1
    hi = int(np.ceil(max(ia[main], ib[main]) + rv)) + 1
    lo, hi = max(lo, 0), min(hi, dims[main] - 1)
    if hi < lo:
        return np.empty(0, dtype=np.int64), np.empty(0)
    fm = f[main]
    half1 = rv * np.sqrt(max(1.0 - f[o2] ** 2, 0.0)) / abs(fm) + 1.0
    half2 = rv * np.sqrt(max(1.0 - f[o1] ** 2, 0.0)) / abs(fm) + 1.0
    slices = np.arange(lo, hi + 1)
    # axis crossing of each slice plane, clamped to the segment's range
    t = (slices - ia[main]) / fm
    t_lo, t_hi = 0.0, (back + ahead) / sp
    t = np.clip(t, min(t_lo, t_hi), max(t_lo, t_hi))
    c1 = ia[o1] + t * f[o1]
    c2 = ia[o2] + t * f[o2]
    w1 = int(np.ceil(half1 + rv * abs(f[o1]) / abs(fm)))
    w2 = int(np.ceil(half2 + rv * abs(f[o2]) / abs(fm)))
    off1 = np.arange(-w1, w1 + 1)
    off2 = np.arange(-w2, w2 + 1)
    i_main = np.broadcast_to(slices[:, None, None], (len(slices), len(off1), len(off2)))
    i1 = np.rint(c1)[:, None, None].astype(np.int64) + off1[None, :, None]
    i2 = np.rint(c2)[:, None, None].astype(np.int64) + off2[None, None, :]
    i1 = np.broadcast_to(i1, i_main.shape)
    i2 = np.broadcast_to(i2, i_main.shape)
    ok = (i1 >= 0) & (i1 < dims[o1]) & (i2 >= 0) & (i2 < dims[o2])
    idx = np.empty((int(ok.sum()), 3), dtype=np.int64)
    idx[:, main] = i_main[ok]
    idx[:, o1] = i1[ok]
    idx[:, o2] = i2[ok]
    rel = vol.origin + sp * idx - pose.tip
    s = rel @ f
    perp2 = np.einsum("ij,ij->i", rel, rel) - s * s
    keep = (s >= -back) & (s <= ahead) & (perp2 <= radius * radius)
    idx, s = idx[keep], s[keep]
    flat = np.ravel_multi_index(idx.T, vol.dims)
    order = np.argsort(flat, kind="stable")
    flat, s = flat[order], s[order]
    # slices can overlap by one voxel on steep orientations
    uniq = np.concatenate([[True], flat[1:] != flat[:-1]]) if len(flat) else np.zeros(0, bool)
    return flat[uniq], s[uniq]


def rasterize_cylinder(cyl: DrillCylinder, vol: LabelVolume) -> np.ndarray:
    """Sorted flat indices of voxels whose centers lie inside the drill cylinder.

    A voxel belongs to the cylinder when its center projects onto the axis
    segment and lies within ``diameter / 2`` of the axis. Portions outside
    the volume are clipped.
    """
    flat, _ = _tube_voxels(cyl.pose, cyl.diameter / 2.0, cyl.length, 0.0, vol)
    return flat


def intersection_volume(voxels, vol: LabelVolume, group: Label) -> float:
    """Volume in mm^3 of the voxels in ``voxels`` carrying label ``group``."""
    voxels = np.asarray(voxels, dtype=np.int64)
    if voxels.size == 0:
        return 0.0
    n = int(np.count_nonzero(vol.labels.ravel()[voxels] == group))
    return n * vol.voxel_volume


def _axis_bone(vol: LabelVolume, pose: DrillPose, s) -> np.ndarray:
    pts = pose.tip + np.asarray(s, dtype=float)[..., None] * pose.forward
    lab = vol.label_at(pts)
    return (lab == Label.CORTICAL) | (lab == Label.CANCELLOUS)


def breakthrough(cyl: DrillCylinder, vol: LabelVolume) -> bool:
    """True when the tip left bone through its far side.

    The axis is sampled from the tip backward every ``spacing / 2``; the tip
    sample must be non-bone while some sample behind it, within the drill
    length, is bone.
    """
    h = vol.spacing / 2.0
    k = int(np.floor(cyl.length / h + 1e-9))
    bone = _axis_bone(vol, cyl.pose, -h * np.arange(k + 1))
    return bool(not bone[0] and bone[1:].any())


def is_safe(cyl: DrillCylinder, vol: LabelVolume) -> bool:
    voxels = rasterize_cylinder(cyl, vol)
    if voxels.size and np.any(vol.labels.ravel()[voxels] == Label.NOGO):
        return False
    return not breakthrough(cyl, vol)


def unsafe_profile(
    pose: DrillPose,
    diameter: float,
    vol: LabelVolume,
    horizon: float = DEFAULT_HORIZON,
    step: float = DEFAULT_SWEEP_STEP,
    length: float = DEFAULT_DRILL_LENGTH,
    tube=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Unsafe flag for each forward translation t in {0, step, ..., horizon}.

    Equivalent to evaluating :func:`is_safe` on every translated drill, but
    shares one tube rasterization and one axis sampling across all offsets.
    ``tube`` may pass a precomputed ``_tube_voxels(pose, d/2, length,
    horizon, vol)`` result.
    """
    if not (horizon > 0 and step > 0):
        raise ValueError("horizon and step must be positive")
    n = int(np.floor(horizon / step + 1e-9))
    ts = step * np.arange(n + 1)
    if tube is None:
        tube = _tube_voxels(pose, diameter / 2.0, length, horizon, vol)
    flat, s = tube
    s_nogo = np.sort(s[vol.labels.ravel()[flat] == Label.NOGO])
    # a NoGo center at axial s is inside the drill translated by t iff t - L <= s <= t
    first = np.searchsorted(s_nogo, ts - length, side="left")
    last = np.searchsorted(s_nogo, ts, side="right")
    hit = last > first

    h = vol.spacing / 2.0
    k = int(np.floor(length / h + 1e-9))
    ratio = step / h
    if abs(ratio - round(ratio)) < 1e-9:
        r = int(round(ratio))
        # lattice s_j = j*h covering [-k*h, n*r*h]
        j = np.arange(-k, n * r + 1)
        bone = _axis_bone(vol, pose, j * h).astype(np.int64)
        csum = np.concatenate([[0], np.cumsum(bone)])
        tip_j = np.arange(n + 1) * r + k  # position of t in the lattice array
        behind = csum[tip_j] - csum[tip_j - k]
        through = (bone[tip_j] == 0) & (behind > 0)
    else:
        grid = ts[:, None] - h * np.arange(k + 1)[None, :]
        bone = _axis_bone(vol, pose, grid)
        through = ~bone[:, 0] & bone[:, 1:].any(axis=1)
    return ts, hit | through


def safe_distance(
    pose: DrillPose,
    diameter: float,
    vol: LabelVolume,
    horizon: float = DEFAULT_HORIZON,
    step: float = DEFAULT_SWEEP_STEP,
    length: float = DEFAULT_DRILL_LENGTH,
    tube=None,
) -> float:
    """Smallest forward translation (on the ``step`` grid) reaching an unsafe state.

    Returns 0 if the current pose is already unsafe and ``horizon`` if no
    sampled translation is unsafe.
    """
    ts, unsafe = unsafe_profile(pose, diameter, vol, horizon, step, length, tube)
    hits = np.flatnonzero(unsafe)
    return float(ts[hits[0]]) if hits.size else float(horizon)


def extract_dorsal_surface(vol: LabelVolume) -> np.ndarray:
    """World positions of the first Cortical voxel along +x in every (y, z) column."""
    cort = vol.labels == Label.CORTICAL
    hit = cort.any(axis=0)
    if not hit.any():
        raise GeometryError("volume contains no cortical bone")
    first = np.argmax(cort, axis=0)
    j, k = np.nonzero(hit)
    idx = np.column_stack([first[j, k], j, k])
    return vol.index_to_world(idx)
